#pragma once

// Shared test helpers: random tensors and the central finite-difference
// gradient oracle used against every differentiable op.

#include "gecfuse/ops.hpp"
#include "gecfuse/rng.hpp"
#include "gecfuse/tensor.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace testutil {

inline gecfuse::Tensor<double> rand_tensor(std::vector<int> shape, gecfuse::Rng& rng,
                                           double lo = -1.0, double hi = 1.0,
                                           bool requires_grad = true) {
  auto t = gecfuse::Tensor<double>::zeros(std::move(shape), requires_grad);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst;  // "param p element j"
};

// Central finite differences (h = 1e-4 by default) against the analytic
// gradient computed by one backward pass. `fwd` must rebuild the graph from
// the leaf parameters every time it is called.
inline GradCheckResult grad_check(std::vector<gecfuse::Tensor<double>> params,
                                  const std::function<gecfuse::Tensor<double>()>& fwd,
                                  double h = 1e-4) {
  using gecfuse::backward;
  for (auto& p : params) p.zero_grad();
  auto loss = fwd();
  backward(loss);

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double orig = p.data()[j];
      p.data()[j] = orig + h;
      const double up = fwd().item();
      p.data()[j] = orig - h;
      const double dn = fwd().item();
      p.data()[j] = orig;
      const double fd = (up - dn) / (2.0 * h);
      const double an = p.has_grad() ? p.grad()[j] : 0.0;
      const double rel = std::abs(an - fd) / std::max({1e-6, std::abs(an), std::abs(fd)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "param " + std::to_string(pi) + " element " + std::to_string(j) +
                    " analytic " + std::to_string(an) + " fd " + std::to_string(fd);
      }
    }
  }
  return res;
}

}  // namespace testutil
