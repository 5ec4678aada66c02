#pragma once

// Autodiff ops over Tensor. Forward paths run on the dispatched kernels;
// each op that participates in training carries a hand-written backward
// closure. Gradients accumulate (+=) into parents.

#include "gecfuse/kernels/kernels.hpp"
#include "gecfuse/rng.hpp"
#include "gecfuse/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

namespace gecfuse {

namespace detail {

template <class T, class... Ts>
bool recording(const Tensor<T>& first, const Ts&... rest) {
  if (!grad_enabled()) return false;
  return (first.requires_grad() || ... || rest.requires_grad());
}

template <class T>
void attach(Tensor<T>& out, std::vector<std::shared_ptr<Node<T>>> parents,
            std::function<void(Node<T>&)> fn) {
  auto n = out.node();
  n->leaf = false;
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backprop = std::move(fn);
}

// += g into p's grad, if p wants one
template <class T>
void acc_grad(const std::shared_ptr<Node<T>>& p, const T* g, std::size_t n) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  kernels::get<T>().axpy(T(1), g, p->grad.data(), static_cast<int>(n));
}

}  // namespace detail

// ------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch");
  auto out = Tensor<T>::zeros(a.shape());
  kernels::get<T>().vadd(a.data(), b.data(), out.data(), static_cast<int>(a.size()));
  if (detail::recording(a, b)) {
    detail::attach<T>(out, {a.node(), b.node()},
                      [an = a.node(), bn = b.node()](detail::Node<T>& o) {
                        detail::acc_grad(an, o.grad.data(), o.grad.size());
                        detail::acc_grad(bn, o.grad.data(), o.grad.size());
                      });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  auto out = Tensor<T>::zeros(a.shape());
  kernels::get<T>().vsub(a.data(), b.data(), out.data(), static_cast<int>(a.size()));
  if (detail::recording(a, b)) {
    detail::attach<T>(out, {a.node(), b.node()},
                      [an = a.node(), bn = b.node()](detail::Node<T>& o) {
                        detail::acc_grad(an, o.grad.data(), o.grad.size());
                        if (bn->requires_grad) {
                          bn->ensure_grad();
                          kernels::get<T>().axpy(T(-1), o.grad.data(), bn->grad.data(),
                                                 static_cast<int>(o.grad.size()));
                        }
                      });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  auto out = Tensor<T>::zeros(a.shape());
  kernels::get<T>().vmul(a.data(), b.data(), out.data(), static_cast<int>(a.size()));
  if (detail::recording(a, b)) {
    detail::attach<T>(out, {a.node(), b.node()},
                      [an = a.node(), bn = b.node()](detail::Node<T>& o) {
                        const auto n = static_cast<int>(o.grad.size());
                        std::vector<T> tmp(o.grad.size());
                        if (an->requires_grad) {
                          kernels::get<T>().vmul(o.grad.data(), bn->val.data(), tmp.data(), n);
                          detail::acc_grad(an, tmp.data(), tmp.size());
                        }
                        if (bn->requires_grad) {
                          kernels::get<T>().vmul(o.grad.data(), an->val.data(), tmp.data(), n);
                          detail::acc_grad(bn, tmp.data(), tmp.size());
                        }
                      });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = a.clone();
  out.set_requires_grad(false);
  kernels::get<T>().scale(c, out.data(), static_cast<int>(out.size()));
  if (detail::recording(a)) {
    detail::attach<T>(out, {a.node()}, [an = a.node(), c](detail::Node<T>& o) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      kernels::get<T>().axpy(c, o.grad.data(), an->grad.data(),
                             static_cast<int>(o.grad.size()));
    });
  }
  return out;
}

// ------------------------------------------------------------------ matmul

// a[m x k] * b[k x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.rows(),
        "matmul: incompatible shapes");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  auto out = Tensor<T>::zeros({m, n});
  kernels::get<T>().gemm_nn(a.data(), k, b.data(), n, out.data(), n, m, k, n, false);
  if (detail::recording(a, b)) {
    detail::attach<T>(out, {a.node(), b.node()},
                      [an = a.node(), bn = b.node(), m, k, n](detail::Node<T>& o) {
                        const auto& kn = kernels::get<T>();
                        if (an->requires_grad) {
                          an->ensure_grad();
                          kn.gemm_nt(o.grad.data(), n, bn->val.data(), n,
                                     an->grad.data(), k, m, n, k, true);
                        }
                        if (bn->requires_grad) {
                          bn->ensure_grad();
                          kn.gemm_tn(an->val.data(), k, o.grad.data(), n,
                                     bn->grad.data(), n, m, k, n, true);
                        }
                      });
  }
  return out;
}

// a[m x k] * b[n x k]^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.cols(),
        "matmul_nt: incompatible shapes");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  auto out = Tensor<T>::zeros({m, n});
  kernels::get<T>().gemm_nt(a.data(), k, b.data(), k, out.data(), n, m, k, n, false);
  if (detail::recording(a, b)) {
    detail::attach<T>(out, {a.node(), b.node()},
                      [an = a.node(), bn = b.node(), m, k, n](detail::Node<T>& o) {
                        const auto& kn = kernels::get<T>();
                        if (an->requires_grad) {
                          an->ensure_grad();
                          kn.gemm_nn(o.grad.data(), n, bn->val.data(), k,
                                     an->grad.data(), k, m, n, k, true);
                        }
                        if (bn->requires_grad) {
                          bn->ensure_grad();
                          kn.gemm_tn(o.grad.data(), n, an->val.data(), k,
                                     bn->grad.data(), k, m, n, k, true);
                        }
                      });
  }
  return out;
}

namespace detail {
template <class T>
void add_rowwise(T* y, const T* bias, int rows, int cols) {
  for (int i = 0; i < rows; ++i)
    kernels::get<T>().axpy(T(1), bias, y + static_cast<std::ptrdiff_t>(i) * cols, cols);
}
template <class T>
void colsum_into(const std::shared_ptr<Node<T>>& p, const T* g, int rows, int cols) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  for (int i = 0; i < rows; ++i)
    kernels::get<T>().axpy(T(1), g + static_cast<std::ptrdiff_t>(i) * cols,
                           p->grad.data(), cols);
}
}  // namespace detail

// x[m x in] * w[in x out] + bias[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  check(x.ndim() == 2 && w.ndim() == 2 && x.cols() == w.rows(), "linear: shape mismatch");
  check(bias.size() == static_cast<std::size_t>(w.cols()), "linear: bad bias length");
  const int m = x.rows(), in = x.cols(), out_dim = w.cols();
  auto out = Tensor<T>::zeros({m, out_dim});
  kernels::get<T>().gemm_nn(x.data(), in, w.data(), out_dim, out.data(), out_dim,
                            m, in, out_dim, false);
  detail::add_rowwise(out.data(), bias.data(), m, out_dim);
  if (detail::recording(x, w, bias)) {
    detail::attach<T>(out, {x.node(), w.node(), bias.node()},
                      [xn = x.node(), wn = w.node(), bn = bias.node(), m, in,
                       out_dim](detail::Node<T>& o) {
                        const auto& kn = kernels::get<T>();
                        if (xn->requires_grad) {
                          xn->ensure_grad();
                          kn.gemm_nt(o.grad.data(), out_dim, wn->val.data(), out_dim,
                                     xn->grad.data(), in, m, out_dim, in, true);
                        }
                        if (wn->requires_grad) {
                          wn->ensure_grad();
                          kn.gemm_tn(xn->val.data(), in, o.grad.data(), out_dim,
                                     wn->grad.data(), out_dim, m, in, out_dim, true);
                        }
                        detail::colsum_into(bn, o.grad.data(), m, out_dim);
                      });
  }
  return out;
}

// x[m x d] * emb[v x d]^T + bias[v]  (tied output projection)
template <class T>
Tensor<T> linear_tied(const Tensor<T>& x, const Tensor<T>& emb, const Tensor<T>& bias) {
  check(x.cols() == emb.cols(), "linear_tied: width mismatch");
  check(bias.size() == static_cast<std::size_t>(emb.rows()), "linear_tied: bad bias length");
  auto out = matmul_nt(x, emb);
  const int m = out.rows(), v = out.cols();
  detail::add_rowwise(out.data(), bias.data(), m, v);
  if (detail::recording(bias) && out.requires_grad()) {
    // fold the bias into the existing matmul_nt node
    auto n = out.node();
    n->parents.push_back(bias.node());
    auto prev = std::move(n->backprop);
    n->backprop = [prev = std::move(prev), bn = bias.node(), m, v](detail::Node<T>& o) {
      prev(o);
      detail::colsum_into(bn, o.grad.data(), m, v);
    };
  } else if (detail::recording(bias)) {
    detail::attach<T>(out, {bias.node()}, [bn = bias.node(), m, v](detail::Node<T>& o) {
      detail::colsum_into(bn, o.grad.data(), m, v);
    });
  }
  return out;
}

// --------------------------------------------------------------- embedding

template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  check(table.ndim() == 2, "embedding: table must be 2-d");
  check(!ids.empty(), "embedding: empty id sequence");
  const int v = table.rows(), d = table.cols();
  for (int id : ids)
    check(id >= 0 && id < v, "embedding: token id out of range");
  auto out = Tensor<T>::zeros({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data() + static_cast<std::ptrdiff_t>(ids[i]) * d, d,
                out.data() + static_cast<std::ptrdiff_t>(i) * d);
  if (detail::recording(table)) {
    detail::attach<T>(out, {table.node()},
                      [tn = table.node(), ids, d](detail::Node<T>& o) {
                        if (!tn->requires_grad) return;
                        tn->ensure_grad();
                        for (std::size_t i = 0; i < ids.size(); ++i)
                          kernels::get<T>().axpy(
                              T(1), o.grad.data() + static_cast<std::ptrdiff_t>(i) * d,
                              tn->grad.data() + static_cast<std::ptrdiff_t>(ids[i]) * d, d);
                      });
  }
  return out;
}

// ---------------------------------------------------------------- layernorm

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  check(x.ndim() == 2, "layer_norm: input must be 2-d");
  const int m = x.rows(), n = x.cols();
  check(gain.size() == static_cast<std::size_t>(n) && bias.size() == static_cast<std::size_t>(n),
        "layer_norm: gain/bias length mismatch");
  auto out = Tensor<T>::zeros({m, n});
  auto stats = std::make_shared<std::vector<T>>(2 * m);  // mean, rstd per row
  for (int i = 0; i < m; ++i) {
    const T* xr = x.data() + static_cast<std::ptrdiff_t>(i) * n;
    T* yr = out.data() + static_cast<std::ptrdiff_t>(i) * n;
    const T mu = kernels::get<T>().reduce_sum(xr, n) / T(n);
    T var = 0;
    for (int j = 0; j < n; ++j) {
      const T c = xr[j] - mu;
      var += c * c;
    }
    var /= T(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    (*stats)[2 * i] = mu;
    (*stats)[2 * i + 1] = rstd;
    for (int j = 0; j < n; ++j) yr[j] = (xr[j] - mu) * rstd * gain.data()[j] + bias.data()[j];
  }
  if (detail::recording(x, gain, bias)) {
    detail::attach<T>(
        out, {x.node(), gain.node(), bias.node()},
        [xn = x.node(), gn = gain.node(), bn = bias.node(), stats, m, n](detail::Node<T>& o) {
          std::vector<T> dg(n, T(0)), db(n, T(0)), xhat(n), dxh(n);
          const bool want_x = xn->requires_grad;
          if (want_x) xn->ensure_grad();
          for (int i = 0; i < m; ++i) {
            const T* xr = xn->val.data() + static_cast<std::ptrdiff_t>(i) * n;
            const T* gr = o.grad.data() + static_cast<std::ptrdiff_t>(i) * n;
            const T mu = (*stats)[2 * i], rstd = (*stats)[2 * i + 1];
            T sum_dxh = 0, sum_dxh_xh = 0;
            for (int j = 0; j < n; ++j) {
              xhat[j] = (xr[j] - mu) * rstd;
              dxh[j] = gr[j] * gn->val[j];
              dg[j] += gr[j] * xhat[j];
              db[j] += gr[j];
              sum_dxh += dxh[j];
              sum_dxh_xh += dxh[j] * xhat[j];
            }
            if (want_x) {
              T* dxr = xn->grad.data() + static_cast<std::ptrdiff_t>(i) * n;
              const T inv_n = T(1) / T(n);
              for (int j = 0; j < n; ++j)
                dxr[j] += rstd * (dxh[j] - inv_n * sum_dxh - xhat[j] * inv_n * sum_dxh_xh);
            }
          }
          detail::acc_grad(gn, dg.data(), dg.size());
          detail::acc_grad(bn, db.data(), db.size());
        });
  }
  return out;
}

// --------------------------------------------------------------------- gelu

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  kernels::get<T>().gelu_fwd(x.data(), out.data(), static_cast<int>(x.size()));
  if (detail::recording(x)) {
    detail::attach<T>(out, {x.node()}, [xn = x.node()](detail::Node<T>& o) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      kernels::get<T>().gelu_bwd(xn->val.data(), o.grad.data(), xn->grad.data(),
                                 static_cast<int>(o.grad.size()));
    });
  }
  return out;
}

// ------------------------------------------------------------------ dropout

// Inverted dropout; caller applies only in train mode.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  check(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
  if (rate == 0.0) return x;
  auto keep = std::make_shared<std::vector<T>>(x.size());
  const T inv = T(1.0 / (1.0 - rate));
  for (auto& kv : *keep) kv = rng.bernoulli(rate) ? T(0) : inv;
  auto out = Tensor<T>::zeros(x.shape());
  kernels::get<T>().vmul(x.data(), keep->data(), out.data(), static_cast<int>(x.size()));
  if (detail::recording(x)) {
    detail::attach<T>(out, {x.node()}, [xn = x.node(), keep](detail::Node<T>& o) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      std::vector<T> tmp(o.grad.size());
      kernels::get<T>().vmul(o.grad.data(), keep->data(), tmp.data(),
                             static_cast<int>(o.grad.size()));
      kernels::get<T>().axpy(T(1), tmp.data(), xn->grad.data(),
                             static_cast<int>(tmp.size()));
    });
  }
  return out;
}

// ------------------------------------------------------------------ softmax

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  check(x.ndim() == 2, "softmax_rows: input must be 2-d");
  const int m = x.rows(), n = x.cols();
  auto out = Tensor<T>::zeros({m, n});
  for (int i = 0; i < m; ++i)
    kernels::get<T>().softmax_row(x.data() + static_cast<std::ptrdiff_t>(i) * n,
                                  out.data() + static_cast<std::ptrdiff_t>(i) * n, n);
  if (detail::recording(x)) {
    detail::attach<T>(out, {x.node()}, [xn = x.node(), m, n](detail::Node<T>& o) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const T* y = o.val.data() + static_cast<std::ptrdiff_t>(i) * n;
        const T* gy = o.grad.data() + static_cast<std::ptrdiff_t>(i) * n;
        T* gx = xn->grad.data() + static_cast<std::ptrdiff_t>(i) * n;
        const T r = kernels::get<T>().dot(gy, y, n);
        for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - r);
      }
    });
  }
  return out;
}

// -------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = Tensor<T>::scalar(kernels::get<T>().reduce_sum(x.data(), static_cast<int>(x.size())));
  if (detail::recording(x)) {
    detail::attach<T>(out, {x.node()}, [xn = x.node()](detail::Node<T>& o) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const T g = o.grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / T(x.size());
  auto out = Tensor<T>::scalar(
      kernels::get<T>().reduce_sum(x.data(), static_cast<int>(x.size())) * inv);
  if (detail::recording(x)) {
    detail::attach<T>(out, {x.node()}, [xn = x.node(), inv](detail::Node<T>& o) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const T g = o.grad[0] * inv;
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

// ------------------------------------------------------------------ losses

// Mean label-smoothed cross-entropy over non-pad rows. The smoothing mass
// eps_ls is spread uniformly over the vocab - 1 non-gold labels.
template <class T>
Tensor<T> label_smoothed_ce(const Tensor<T>& logits, const std::vector<int>& targets,
                            double eps_ls, int pad_id) {
  check(logits.ndim() == 2, "label_smoothed_ce: logits must be 2-d");
  check(eps_ls >= 0.0 && eps_ls < 1.0, "label_smoothed_ce: eps_ls must be in [0,1)");
  const int rows = logits.rows(), v = logits.cols();
  check(static_cast<std::size_t>(rows) == targets.size(),
        "label_smoothed_ce: target length mismatch");
  check(v >= 2, "label_smoothed_ce: vocab must have at least 2 entries");
  int n_live = 0;
  for (int t : targets) {
    if (t == pad_id) continue;
    check(t >= 0 && t < v, "label_smoothed_ce: target out of vocab range");
    ++n_live;
  }
  check(n_live > 0, "label_smoothed_ce: all positions padded");

  const T eps = static_cast<T>(eps_ls);
  const T off = eps / T(v - 1);   // mass per non-gold label
  const T on = T(1) - eps;
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  T total = 0;
  for (int i = 0; i < rows; ++i) {
    if (targets[i] == pad_id) continue;
    const T* z = logits.data() + static_cast<std::ptrdiff_t>(i) * v;
    T* p = probs->data() + static_cast<std::ptrdiff_t>(i) * v;
    const T zmax = kernels::get<T>().reduce_max(z, v);
    T zsum = 0, lse = 0;
    for (int j = 0; j < v; ++j) {
      p[j] = std::exp(z[j] - zmax);
      lse += p[j];
      zsum += z[j];
    }
    const T inv = T(1) / lse;
    kernels::get<T>().scale(inv, p, v);
    lse = zmax + std::log(lse);
    const T zg = z[targets[i]];
    total += lse - on * zg - off * (zsum - zg);
  }
  auto out = Tensor<T>::scalar(total / T(n_live));
  if (detail::recording(logits)) {
    detail::attach<T>(
        out, {logits.node()},
        [ln = logits.node(), probs, targets, rows, v, on, off, pad_id,
         n_live](detail::Node<T>& o) {
          if (!ln->requires_grad) return;
          ln->ensure_grad();
          const T g = o.grad[0] / T(n_live);
          for (int i = 0; i < rows; ++i) {
            if (targets[i] == pad_id) continue;
            const T* p = probs->data() + static_cast<std::ptrdiff_t>(i) * v;
            T* gz = ln->grad.data() + static_cast<std::ptrdiff_t>(i) * v;
            for (int j = 0; j < v; ++j) gz[j] += g * (p[j] - off);
            gz[targets[i]] -= g * (on - off);
          }
        });
  }
  return out;
}

// Mean binary cross-entropy over logits; labels in {0,1}.
template <class T>
Tensor<T> bce_logits(const Tensor<T>& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.size();
  check(n == labels.size(), "bce_logits: label length mismatch");
  check(n > 0, "bce_logits: empty input");
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits.data()[i];
    const T y = static_cast<T>(labels[i]);
    total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto out = Tensor<T>::scalar(total / T(n));
  if (detail::recording(logits)) {
    detail::attach<T>(out, {logits.node()},
                      [ln = logits.node(), labels, n](detail::Node<T>& o) {
                        if (!ln->requires_grad) return;
                        ln->ensure_grad();
                        const T g = o.grad[0] / T(n);
                        for (std::size_t i = 0; i < n; ++i) {
                          const T z = ln->val[i];
                          const T s = T(1) / (T(1) + std::exp(-z));
                          ln->grad[i] += g * (s - static_cast<T>(labels[i]));
                        }
                      });
  }
  return out;
}

// ---------------------------------------------------------------- attention

namespace detail {

// Layout bookkeeping for packed segment attention probabilities:
// per segment s, per head h, an (m_s x n_s) block, stored contiguously.
struct AttnLayout {
  std::vector<int> q_off, kv_off;
  std::vector<std::size_t> prob_off;  // per segment, head-0 block offset
  int n_heads = 0;
  std::size_t total = 0;
};

inline AttnLayout attn_layout(std::vector<int> q_off, std::vector<int> kv_off, int n_heads) {
  AttnLayout lay;
  lay.q_off = std::move(q_off);
  lay.kv_off = std::move(kv_off);
  lay.n_heads = n_heads;
  lay.prob_off.resize(lay.q_off.size() - 1);
  std::size_t total = 0;
  for (std::size_t s = 0; s + 1 < lay.q_off.size(); ++s) {
    lay.prob_off[s] = total;
    const std::size_t m = static_cast<std::size_t>(lay.q_off[s + 1] - lay.q_off[s]);
    const std::size_t n = static_cast<std::size_t>(lay.kv_off[s + 1] - lay.kv_off[s]);
    total += m * n * static_cast<std::size_t>(n_heads);
  }
  lay.total = total;
  return lay;
}

}  // namespace detail

// Scaled dot-product multi-head attention over packed independent segments.
// Segment s: query rows [q_off[s], q_off[s+1]) attend to key/value rows
// [kv_off[s], kv_off[s+1]). With `causal` set, query i sees kv positions
// <= i (segment lengths must match). `ext_mask`, when non-null, is a per
// segment row-major [m_s x n_s] allow-mask applied on top.
template <class T>
Tensor<T> mha_packed(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                     const std::vector<int>& q_offsets, const std::vector<int>& kv_offsets,
                     int n_heads, bool causal,
                     const std::vector<const std::uint8_t*>* ext_mask = nullptr) {
  const int d = q.cols();
  check(k.cols() == d && v.cols() == d, "attention: d_model mismatch between q/k/v");
  check(n_heads > 0 && d % n_heads == 0, "attention: d_model not divisible by n_heads");
  check(q_offsets.size() == kv_offsets.size() && q_offsets.size() >= 2,
        "attention: bad offset arrays");
  check(q_offsets.front() == 0 && q_offsets.back() == q.rows() &&
            kv_offsets.front() == 0 && kv_offsets.back() == k.rows() && k.rows() == v.rows(),
        "attention: offsets do not cover inputs");
  const int dh = d / n_heads;
  const T alpha = T(1) / std::sqrt(T(dh));
  const std::size_t n_seg = q_offsets.size() - 1;

  auto lay = std::make_shared<detail::AttnLayout>(
      detail::attn_layout(q_offsets, kv_offsets, n_heads));
  auto probs = std::make_shared<std::vector<T>>(lay->total);
  auto out = Tensor<T>::zeros({q.rows(), d});
  const auto& kn = kernels::get<T>();
  std::vector<T> scores;
  const T neg_inf = -std::numeric_limits<T>::infinity();

  for (std::size_t s = 0; s < n_seg; ++s) {
    const int q0 = q_offsets[s], m = q_offsets[s + 1] - q0;
    const int k0 = kv_offsets[s], n = kv_offsets[s + 1] - k0;
    check(m >= 0 && n > 0, "attention: empty key/value segment");
    if (causal) check(m == n, "attention: causal segments must be square");
    scores.resize(static_cast<std::size_t>(m) * n);
    const std::uint8_t* msk = ext_mask ? (*ext_mask)[s] : nullptr;
    for (int h = 0; h < n_heads; ++h) {
      const T* qh = q.data() + static_cast<std::ptrdiff_t>(q0) * d + h * dh;
      const T* kh = k.data() + static_cast<std::ptrdiff_t>(k0) * d + h * dh;
      const T* vh = v.data() + static_cast<std::ptrdiff_t>(k0) * d + h * dh;
      kn.gemm_nt(qh, d, kh, d, scores.data(), n, m, dh, n, false);
      kn.scale(alpha, scores.data(), static_cast<int>(scores.size()));
      for (int i = 0; i < m; ++i) {
        T* row = scores.data() + static_cast<std::ptrdiff_t>(i) * n;
        if (causal)
          for (int j = i + 1; j < n; ++j) row[j] = neg_inf;
        if (msk) {
          bool any = false;
          for (int j = 0; j < n; ++j) {
            if (msk[static_cast<std::size_t>(i) * n + j]) {
              any = true;
            } else {
              row[j] = neg_inf;
            }
          }
          check(any, "attention: fully masked query row");
        }
      }
      T* pblock = probs->data() + lay->prob_off[s] +
                  static_cast<std::size_t>(h) * m * n;
      for (int i = 0; i < m; ++i)
        kn.softmax_row(scores.data() + static_cast<std::ptrdiff_t>(i) * n,
                       pblock + static_cast<std::ptrdiff_t>(i) * n, n);
      kn.gemm_nn(pblock, n, vh, d, out.data() + static_cast<std::ptrdiff_t>(q0) * d + h * dh,
                 d, m, n, dh, false);
    }
  }

  if (detail::recording(q, k, v)) {
    detail::attach<T>(
        out, {q.node(), k.node(), v.node()},
        [qn = q.node(), kn_ = k.node(), vn = v.node(), probs, lay, d, dh,
         alpha](detail::Node<T>& o) {
          const auto& kr = kernels::get<T>();
          if (qn->requires_grad) qn->ensure_grad();
          if (kn_->requires_grad) kn_->ensure_grad();
          if (vn->requires_grad) vn->ensure_grad();
          std::vector<T> dp, ds;
          const std::size_t n_seg = lay->q_off.size() - 1;
          for (std::size_t s = 0; s < n_seg; ++s) {
            const int q0 = lay->q_off[s], m = lay->q_off[s + 1] - q0;
            const int k0 = lay->kv_off[s], n = lay->kv_off[s + 1] - k0;
            dp.resize(static_cast<std::size_t>(m) * n);
            ds.resize(static_cast<std::size_t>(m) * n);
            for (int h = 0; h < lay->n_heads; ++h) {
              const T* pblock = probs->data() + lay->prob_off[s] +
                                static_cast<std::size_t>(h) * m * n;
              const T* go = o.grad.data() + static_cast<std::ptrdiff_t>(q0) * d + h * dh;
              const T* vh = vn->val.data() + static_cast<std::ptrdiff_t>(k0) * d + h * dh;
              // dP = dO_h V_h^T
              kr.gemm_nt(go, d, vh, d, dp.data(), n, m, dh, n, false);
              // dV_h += P^T dO_h
              if (vn->requires_grad)
                kr.gemm_tn(pblock, n, go, d,
                           vn->grad.data() + static_cast<std::ptrdiff_t>(k0) * d + h * dh, d,
                           m, n, dh, true);
              // dS = alpha * P (dP - rowdot(dP, P))
              for (int i = 0; i < m; ++i) {
                const T* pi = pblock + static_cast<std::ptrdiff_t>(i) * n;
                const T* dpi = dp.data() + static_cast<std::ptrdiff_t>(i) * n;
                T* dsi = ds.data() + static_cast<std::ptrdiff_t>(i) * n;
                const T r = kr.dot(dpi, pi, n);
                for (int j = 0; j < n; ++j) dsi[j] = alpha * pi[j] * (dpi[j] - r);
              }
              const T* qh = qn->val.data() + static_cast<std::ptrdiff_t>(q0) * d + h * dh;
              const T* kh = kn_->val.data() + static_cast<std::ptrdiff_t>(k0) * d + h * dh;
              if (qn->requires_grad)
                kr.gemm_nn(ds.data(), n, kh, d,
                           qn->grad.data() + static_cast<std::ptrdiff_t>(q0) * d + h * dh, d,
                           m, n, dh, true);
              if (kn_->requires_grad)
                kr.gemm_tn(ds.data(), n, qh, d,
                           kn_->grad.data() + static_cast<std::ptrdiff_t>(k0) * d + h * dh, d,
                           m, n, dh, true);
            }
          }
        });
  }
  return out;
}

// Single-segment attention with an optional arbitrary boolean mask
// (true = may attend). Throws on a fully masked query row.
template <class T>
Tensor<T> mha_masked(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                     int n_heads, const std::vector<std::uint8_t>* mask = nullptr) {
  const std::vector<int> qo{0, q.rows()}, ko{0, k.rows()};
  if (mask) {
    check(mask->size() == static_cast<std::size_t>(q.rows()) * k.rows(),
          "attention: mask shape mismatch");
    std::vector<const std::uint8_t*> per_seg{mask->data()};
    return mha_packed(q, k, v, qo, ko, n_heads, false, &per_seg);
  }
  return mha_packed(q, k, v, qo, ko, n_heads, false);
}

// Attention probabilities for inspection (no autodiff): returns per-head
// row-stochastic [m x n] matrices, concatenated head-major.
template <class T>
std::vector<T> attn_probs(const Tensor<T>& q, const Tensor<T>& k, int n_heads,
                          const std::vector<std::uint8_t>* mask = nullptr, bool causal = false) {
  const int d = q.cols(), m = q.rows(), n = k.rows();
  const int dh = d / n_heads;
  const T alpha = T(1) / std::sqrt(T(dh));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  const auto& kn = kernels::get<T>();
  std::vector<T> probs(static_cast<std::size_t>(n_heads) * m * n);
  std::vector<T> scores(static_cast<std::size_t>(m) * n);
  for (int h = 0; h < n_heads; ++h) {
    kn.gemm_nt(q.data() + h * dh, d, k.data() + h * dh, d, scores.data(), n, m, dh, n, false);
    kn.scale(alpha, scores.data(), static_cast<int>(scores.size()));
    for (int i = 0; i < m; ++i) {
      T* row = scores.data() + static_cast<std::ptrdiff_t>(i) * n;
      if (causal)
        for (int j = i + 1; j < n; ++j) row[j] = neg_inf;
      if (mask) {
        bool any = false;
        for (int j = 0; j < n; ++j) {
          if ((*mask)[static_cast<std::size_t>(i) * n + j]) any = true;
          else row[j] = neg_inf;
        }
        check(any, "attention: fully masked query row");
      }
      kn.softmax_row(row, probs.data() + (static_cast<std::size_t>(h) * m + i) * n, n);
    }
  }
  return probs;
}

}  // namespace gecfuse
