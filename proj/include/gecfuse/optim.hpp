#pragma once

// Adam with bias correction, global-norm gradient clipping, and the
// decay-on-plateau learning-rate schedule with its minimum-lr stopping rule.

#include "gecfuse/tensor.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace gecfuse {

template <class T>
struct AdamState {
  long step_count = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;

  static AdamState init(const std::vector<Tensor<T>>& params, double lr, double b1,
                        double b2, double eps) {
    check(b1 > 0 && b1 < 1 && b2 > 0 && b2 < 1, "adam: betas must be in (0,1)");
    check(eps > 0, "adam: epsilon must be positive");
    AdamState st;
    st.learning_rate = lr;
    st.beta1 = b1;
    st.beta2 = b2;
    st.epsilon = eps;
    st.first_moment.reserve(params.size());
    st.second_moment.reserve(params.size());
    for (const auto& p : params) {
      st.first_moment.emplace_back(p.size(), T(0));
      st.second_moment.emplace_back(p.size(), T(0));
    }
    return st;
  }
};

template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
  check(params.size() == state.first_moment.size(), "adam: parameter count mismatch");
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T lr = static_cast<T>(state.learning_rate);
  const T eps = static_cast<T>(state.epsilon);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    check(state.first_moment[i].size() == p.size(), "adam: moment size mismatch");
    if (!p.has_grad()) continue;  // never touched by backward: treat as zero grad
    const T* g = p.grad_data();
    T* m = state.first_moment[i].data();
    T* v = state.second_moment[i].data();
    T* w = p.data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] * inv_bc1;
      const T vhat = v[j] * inv_bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <class T>
double clip_global_norm(std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (const T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      T* g = p.grad_data();
      for (std::size_t j = 0; j < p.size(); ++j) g[j] *= s;
    }
  }
  return norm;
}

template <class T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

// Decay-on-plateau schedule: when the dev loss fails to improve, the rate
// is multiplied by decay_factor; training stops once it falls below min_lr.
struct LrSchedule {
  double current_lr = 0;
  double min_lr = 0;
  double decay_factor = 0.7;
  double best_dev_loss = std::numeric_limits<double>::infinity();
};

struct LrStep {
  double lr;
  bool stop;
  bool improved;
};

inline LrStep lr_plateau_step(LrSchedule& sched, double dev_loss) {
  check(sched.decay_factor > 0 && sched.decay_factor < 1,
        "lr schedule: decay factor must be in (0,1)");
  check(sched.current_lr >= 0, "lr schedule: negative learning rate");
  if (sched.current_lr < sched.min_lr)
    return {sched.current_lr, true, false};
  bool improved = false;
  if (dev_loss < sched.best_dev_loss) {
    sched.best_dev_loss = dev_loss;
    improved = true;
  } else {
    sched.current_lr *= sched.decay_factor;
  }
  return {sched.current_lr, sched.current_lr < sched.min_lr, improved};
}

}  // namespace gecfuse
