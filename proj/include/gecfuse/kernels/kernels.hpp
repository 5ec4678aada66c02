#pragma once

// Numeric inner-loop kernels behind the tensor ops.
//
// Every kernel has a scalar reference implementation and may have SIMD
// variants (AVX2 on x86-64). The active variant is chosen once at startup
// from CPUID, overridable with force_isa() or the GECFUSE_ISA environment
// variable ("scalar" / "avx2"). SIMD variants are equivalence-tested
// against the scalar reference in tests/test_kernels.cpp.
//
// GEMM layouts are row-major. `ld*` are leading dimensions (row strides),
// which lets callers operate on column sub-blocks, e.g. one attention head
// inside a packed [n x d_model] buffer.

#include <cstddef>

namespace gecfuse::kernels {

enum class Isa { scalar, avx2 };

template <class T>
struct Kernels {
  // C[m x n] = (acc ? C : 0) + A[m x k] * B[k x n]
  void (*gemm_nn)(const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                  int m, int k, int n, bool acc);
  // C[m x n] = (acc ? C : 0) + A[m x k] * B[n x k]^T
  void (*gemm_nt)(const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                  int m, int k, int n, bool acc);
  // C[k x n] = (acc ? C : 0) + A[m x k]^T * B[m x n]
  void (*gemm_tn)(const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                  int m, int k, int n, bool acc);

  T (*dot)(const T* x, const T* y, int n);
  void (*axpy)(T alpha, const T* x, T* y, int n);  // y += alpha * x
  void (*scale)(T alpha, T* x, int n);             // x *= alpha
  void (*vadd)(const T* x, const T* y, T* z, int n);
  void (*vsub)(const T* x, const T* y, T* z, int n);
  void (*vmul)(const T* x, const T* y, T* z, int n);

  T (*reduce_sum)(const T* x, int n);
  T (*reduce_max)(const T* x, int n);
  // y = softmax(x); returns nothing, handles -inf entries (weight 0)
  void (*softmax_row)(const T* x, T* y, int n);

  void (*gelu_fwd)(const T* x, T* y, int n);
  // dx += dy * gelu'(x)
  void (*gelu_bwd)(const T* x, const T* dy, T* dx, int n);
};

bool isa_supported(Isa isa);
Isa active_isa();
// Testing hook; throws if the ISA is not supported on this machine.
void force_isa(Isa isa);

const Kernels<float>& get_f32();
const Kernels<double>& get_f64();

template <class T>
const Kernels<T>& get();
template <>
inline const Kernels<float>& get<float>() { return get_f32(); }
template <>
inline const Kernels<double>& get<double>() { return get_f64(); }

}  // namespace gecfuse::kernels
