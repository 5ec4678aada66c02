// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; it is only reachable through the dispatch table after a
// CPUID check, so the rest of the build stays baseline-ISA clean.

#include "gecfuse/kernels/kernels.hpp"
#include "gecfuse/kernels/scalar_impl.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace gecfuse::kernels::avx2 {
namespace {

inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

inline double hsum256d(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  lo = _mm_hadd_pd(lo, lo);
  return _mm_cvtsd_f64(lo);
}

// ---------------------------------------------------------------- float gemm

// 1x16 strip of C accumulated over a 4-unrolled K loop.
void gemm_nn_f32(const float* a, int lda, const float* b, int ldb, float* c,
                 int ldc, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    int j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256 c0 = acc ? _mm256_loadu_ps(crow + j) : _mm256_setzero_ps();
      __m256 c1 = acc ? _mm256_loadu_ps(crow + j + 8) : _mm256_setzero_ps();
      int p = 0;
      for (; p + 4 <= k; p += 4) {
        for (int q = 0; q < 4; ++q) {
          const __m256 av = _mm256_set1_ps(arow[p + q]);
          const float* brow = b + static_cast<std::ptrdiff_t>(p + q) * ldb + j;
          c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow), c0);
          c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), c1);
        }
      }
      for (; p < k; ++p) {
        const __m256 av = _mm256_set1_ps(arow[p]);
        const float* brow = b + static_cast<std::ptrdiff_t>(p) * ldb + j;
        c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow), c0);
        c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), c1);
      }
      _mm256_storeu_ps(crow + j, c0);
      _mm256_storeu_ps(crow + j + 8, c1);
    }
    for (; j + 8 <= n; j += 8) {
      __m256 c0 = acc ? _mm256_loadu_ps(crow + j) : _mm256_setzero_ps();
      for (int p = 0; p < k; ++p) {
        const __m256 av = _mm256_set1_ps(arow[p]);
        c0 = _mm256_fmadd_ps(
            av, _mm256_loadu_ps(b + static_cast<std::ptrdiff_t>(p) * ldb + j), c0);
      }
      _mm256_storeu_ps(crow + j, c0);
    }
    for (; j < n; ++j) {
      float s = acc ? crow[j] : 0.0f;
      for (int p = 0; p < k; ++p)
        s += arow[p] * b[static_cast<std::ptrdiff_t>(p) * ldb + j];
      crow[j] = s;
    }
  }
}

// C[i,j] = dot(A row i, B row j); 4 B rows share one A row load.
void gemm_nt_f32(const float* a, int lda, const float* b, int ldb, float* c,
                 int ldc, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
      __m256 s2 = _mm256_setzero_ps(), s3 = _mm256_setzero_ps();
      const float* b0 = b + static_cast<std::ptrdiff_t>(j) * ldb;
      const float* b1 = b0 + ldb;
      const float* b2 = b1 + ldb;
      const float* b3 = b2 + ldb;
      int p = 0;
      for (; p + 8 <= k; p += 8) {
        const __m256 av = _mm256_loadu_ps(arow + p);
        s0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0 + p), s0);
        s1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1 + p), s1);
        s2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2 + p), s2);
        s3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3 + p), s3);
      }
      float r0 = hsum256(s0), r1 = hsum256(s1), r2 = hsum256(s2), r3 = hsum256(s3);
      for (; p < k; ++p) {
        r0 += arow[p] * b0[p];
        r1 += arow[p] * b1[p];
        r2 += arow[p] * b2[p];
        r3 += arow[p] * b3[p];
      }
      if (acc) {
        crow[j] += r0; crow[j + 1] += r1; crow[j + 2] += r2; crow[j + 3] += r3;
      } else {
        crow[j] = r0; crow[j + 1] = r1; crow[j + 2] = r2; crow[j + 3] = r3;
      }
    }
    for (; j < n; ++j) {
      const float* brow = b + static_cast<std::ptrdiff_t>(j) * ldb;
      __m256 s = _mm256_setzero_ps();
      int p = 0;
      for (; p + 8 <= k; p += 8)
        s = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p), _mm256_loadu_ps(brow + p), s);
      float r = hsum256(s);
      for (; p < k; ++p) r += arow[p] * brow[p];
      crow[j] = acc ? crow[j] + r : r;
    }
  }
}

void gemm_tn_f32(const float* a, int lda, const float* b, int ldb, float* c,
                 int ldc, int m, int k, int n, bool acc) {
  if (!acc) {
    for (int p = 0; p < k; ++p)
      std::fill(c + static_cast<std::ptrdiff_t>(p) * ldc,
                c + static_cast<std::ptrdiff_t>(p) * ldc + n, 0.0f);
  }
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    const float* brow = b + static_cast<std::ptrdiff_t>(i) * ldb;
    for (int p = 0; p < k; ++p) {
      const __m256 av = _mm256_set1_ps(arow[p]);
      float* crow = c + static_cast<std::ptrdiff_t>(p) * ldc;
      int j = 0;
      for (; j + 8 <= n; j += 8)
        _mm256_storeu_ps(crow + j,
                         _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j),
                                         _mm256_loadu_ps(crow + j)));
      for (; j < n; ++j) crow[j] += arow[p] * brow[j];
    }
  }
}

// --------------------------------------------------------------- double gemm

void gemm_nn_f64(const double* a, int lda, const double* b, int ldb, double* c,
                 int ldc, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    double* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    int j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256d c0 = acc ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
      __m256d c1 = acc ? _mm256_loadu_pd(crow + j + 4) : _mm256_setzero_pd();
      for (int p = 0; p < k; ++p) {
        const __m256d av = _mm256_set1_pd(arow[p]);
        const double* brow = b + static_cast<std::ptrdiff_t>(p) * ldb + j;
        c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow), c0);
        c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + 4), c1);
      }
      _mm256_storeu_pd(crow + j, c0);
      _mm256_storeu_pd(crow + j + 4, c1);
    }
    for (; j < n; ++j) {
      double s = acc ? crow[j] : 0.0;
      for (int p = 0; p < k; ++p)
        s += arow[p] * b[static_cast<std::ptrdiff_t>(p) * ldb + j];
      crow[j] = s;
    }
  }
}

// ------------------------------------------------------------------- level 1

float dot_f32(const float* x, const float* y, int n) {
  __m256 s = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8)
    s = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s);
  float r = hsum256(s);
  for (; i < n; ++i) r += x[i] * y[i];
  return r;
}

double dot_f64(const double* x, const double* y, int n) {
  __m256d s = _mm256_setzero_pd();
  int i = 0;
  for (; i + 4 <= n; i += 4)
    s = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s);
  double r = hsum256d(s);
  for (; i < n; ++i) r += x[i] * y[i];
  return r;
}

void axpy_f32(float alpha, const float* x, float* y, int n) {
  const __m256 av = _mm256_set1_ps(alpha);
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f32(float alpha, float* x, int n) {
  const __m256 av = _mm256_set1_ps(alpha);
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(x + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

void vadd_f32(const float* x, const float* y, float* z, int n) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(z + i, _mm256_add_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) z[i] = x[i] + y[i];
}

void vsub_f32(const float* x, const float* y, float* z, int n) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(z + i, _mm256_sub_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) z[i] = x[i] - y[i];
}

void vmul_f32(const float* x, const float* y, float* z, int n) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(z + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

float reduce_sum_f32(const float* x, int n) {
  __m256 s = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8) s = _mm256_add_ps(s, _mm256_loadu_ps(x + i));
  float r = hsum256(s);
  for (; i < n; ++i) r += x[i];
  return r;
}

float reduce_max_f32(const float* x, int n) {
  float r = -std::numeric_limits<float>::infinity();
  __m256 m = _mm256_set1_ps(r);
  int i = 0;
  for (; i + 8 <= n; i += 8) m = _mm256_max_ps(m, _mm256_loadu_ps(x + i));
  alignas(32) float tmp[8];
  _mm256_store_ps(tmp, m);
  for (float v : tmp) r = std::max(r, v);
  for (; i < n; ++i) r = std::max(r, x[i]);
  return r;
}

// max/sum reductions vectorized; exp stays scalar (std::exp), so the result
// matches the reference closely.
void softmax_row_f32(const float* x, float* y, int n) {
  const float m = reduce_max_f32(x, n);
  float z = 0.0f;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - m);
    z += y[i];
  }
  scale_f32(1.0f / z, y, n);
}

}  // namespace

Kernels<float> table_f32() {
  Kernels<float> t{};
  t.gemm_nn = gemm_nn_f32;
  t.gemm_nt = gemm_nt_f32;
  t.gemm_tn = gemm_tn_f32;
  t.dot = dot_f32;
  t.axpy = axpy_f32;
  t.scale = scale_f32;
  t.vadd = vadd_f32;
  t.vsub = vsub_f32;
  t.vmul = vmul_f32;
  t.reduce_sum = reduce_sum_f32;
  t.reduce_max = reduce_max_f32;
  t.softmax_row = softmax_row_f32;
  t.gelu_fwd = scalar::gelu_fwd<float>;
  t.gelu_bwd = scalar::gelu_bwd<float>;
  return t;
}

Kernels<double> table_f64() {
  Kernels<double> t{};
  t.gemm_nn = gemm_nn_f64;
  t.gemm_nt = scalar::gemm_nt<double>;
  t.gemm_tn = scalar::gemm_tn<double>;
  t.dot = dot_f64;
  t.axpy = scalar::axpy<double>;
  t.scale = scalar::scale<double>;
  t.vadd = scalar::vadd<double>;
  t.vsub = scalar::vsub<double>;
  t.vmul = scalar::vmul<double>;
  t.reduce_sum = scalar::reduce_sum<double>;
  t.reduce_max = scalar::reduce_max<double>;
  t.softmax_row = scalar::softmax_row<double>;
  t.gelu_fwd = scalar::gelu_fwd<double>;
  t.gelu_bwd = scalar::gelu_bwd<double>;
  return t;
}

}  // namespace gecfuse::kernels::avx2
