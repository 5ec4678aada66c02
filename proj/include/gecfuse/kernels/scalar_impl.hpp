#pragma once

// Reference kernels. Plain loops, no intrinsics; these define the semantics
// the SIMD variants are tested against.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace gecfuse::kernels::scalar {

template <class T>
void gemm_nn(const T* a, int lda, const T* b, int ldb, T* c, int ldc,
             int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (!acc) std::fill(crow, crow + n, T(0));
    const T* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void gemm_nt(const T* a, int lda, const T* b, int ldb, T* c, int ldc,
             int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::ptrdiff_t>(j) * ldb;
      T s = 0;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

template <class T>
void gemm_tn(const T* a, int lda, const T* b, int ldb, T* c, int ldc,
             int m, int k, int n, bool acc) {
  if (!acc) {
    for (int p = 0; p < k; ++p)
      std::fill(c + static_cast<std::ptrdiff_t>(p) * ldc,
                c + static_cast<std::ptrdiff_t>(p) * ldc + n, T(0));
  }
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    const T* brow = b + static_cast<std::ptrdiff_t>(i) * ldb;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + static_cast<std::ptrdiff_t>(p) * ldc;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
T dot(const T* x, const T* y, int n) {
  T s = 0;
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <class T>
void axpy(T alpha, const T* x, T* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void scale(T alpha, T* x, int n) {
  for (int i = 0; i < n; ++i) x[i] *= alpha;
}

template <class T>
void vadd(const T* x, const T* y, T* z, int n) {
  for (int i = 0; i < n; ++i) z[i] = x[i] + y[i];
}

template <class T>
void vsub(const T* x, const T* y, T* z, int n) {
  for (int i = 0; i < n; ++i) z[i] = x[i] - y[i];
}

template <class T>
void vmul(const T* x, const T* y, T* z, int n) {
  for (int i = 0; i < n; ++i) z[i] = x[i] * y[i];
}

template <class T>
T reduce_sum(const T* x, int n) {
  T s = 0;
  for (int i = 0; i < n; ++i) s += x[i];
  return s;
}

template <class T>
T reduce_max(const T* x, int n) {
  T m = -std::numeric_limits<T>::infinity();
  for (int i = 0; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

template <class T>
void softmax_row(const T* x, T* y, int n) {
  const T m = reduce_max(x, n);
  T z = 0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - m);
    z += y[i];
  }
  const T inv = T(1) / z;
  for (int i = 0; i < n; ++i) y[i] *= inv;
}

// tanh-form gelu; smooth everywhere, which keeps finite-difference gradient
// checks clean.
template <class T>
inline T gelu_one(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
inline T gelu_grad_one(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <class T>
void gelu_fwd(const T* x, T* y, int n) {
  for (int i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

template <class T>
void gelu_bwd(const T* x, const T* dy, T* dx, int n) {
  for (int i = 0; i < n; ++i) dx[i] += dy[i] * gelu_grad_one(x[i]);
}

}  // namespace gecfuse::kernels::scalar
