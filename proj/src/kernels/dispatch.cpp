#include "gecfuse/kernels/kernels.hpp"
#include "gecfuse/kernels/scalar_impl.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace gecfuse::kernels {

#ifdef GECFUSE_HAVE_AVX2
namespace avx2 {
Kernels<float> table_f32();
Kernels<double> table_f64();
}  // namespace avx2
#endif

namespace {

template <class T>
Kernels<T> scalar_table() {
  Kernels<T> t{};
  t.gemm_nn = scalar::gemm_nn<T>;
  t.gemm_nt = scalar::gemm_nt<T>;
  t.gemm_tn = scalar::gemm_tn<T>;
  t.dot = scalar::dot<T>;
  t.axpy = scalar::axpy<T>;
  t.scale = scalar::scale<T>;
  t.vadd = scalar::vadd<T>;
  t.vsub = scalar::vsub<T>;
  t.vmul = scalar::vmul<T>;
  t.reduce_sum = scalar::reduce_sum<T>;
  t.reduce_max = scalar::reduce_max<T>;
  t.softmax_row = scalar::softmax_row<T>;
  t.gelu_fwd = scalar::gelu_fwd<T>;
  t.gelu_bwd = scalar::gelu_bwd<T>;
  return t;
}

struct Tables {
  Kernels<float> f32;
  Kernels<double> f64;
  Isa isa;
};

bool cpu_has_avx2() {
#ifdef GECFUSE_HAVE_AVX2
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa startup_isa() {
  if (const char* env = std::getenv("GECFUSE_ISA")) {
    const std::string s(env);
    if (s == "scalar") return Isa::scalar;
    if (s == "avx2" && cpu_has_avx2()) return Isa::avx2;
  }
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

Tables make_tables(Isa isa) {
  Tables t{scalar_table<float>(), scalar_table<double>(), Isa::scalar};
#ifdef GECFUSE_HAVE_AVX2
  if (isa == Isa::avx2) {
    t.f32 = avx2::table_f32();
    t.f64 = avx2::table_f64();
    t.isa = Isa::avx2;
  }
#else
  (void)isa;
#endif
  return t;
}

Tables& tables() {
  static Tables t = make_tables(startup_isa());
  return t;
}

}  // namespace

bool isa_supported(Isa isa) {
  return isa == Isa::scalar || (isa == Isa::avx2 && cpu_has_avx2());
}

Isa active_isa() { return tables().isa; }

void force_isa(Isa isa) {
  if (!isa_supported(isa)) throw std::runtime_error("requested ISA not supported on this CPU");
  tables() = make_tables(isa);
}

const Kernels<float>& get_f32() { return tables().f32; }
const Kernels<double>& get_f64() { return tables().f64; }

}  // namespace gecfuse::kernels
