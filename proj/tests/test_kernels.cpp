#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gecfuse/kernels/kernels.hpp"
#include "gecfuse/kernels/scalar_impl.hpp"
#include "gecfuse/rng.hpp"

#include <cmath>
#include <vector>

using namespace gecfuse;
namespace kn = gecfuse::kernels;

namespace {

template <class T>
std::vector<T> rand_vec(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return v;
}

template <class T>
T max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  T worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T denom = std::max<T>(T(1), std::max(std::abs(a[i]), std::abs(b[i])));
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// runs fn under both ISAs and reports the result divergence
template <class T, class Fn>
T isa_divergence(Fn&& fn) {
  if (!kn::isa_supported(kn::Isa::avx2)) return T(0);
  kn::force_isa(kn::Isa::scalar);
  auto ref = fn();
  kn::force_isa(kn::Isa::avx2);
  auto simd = fn();
  kn::force_isa(kn::Isa::avx2);
  return max_rel_diff<T>(ref, simd);
}

}  // namespace

TEST_CASE("scalar gemm_nn matches hand example") {
  // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
  std::vector<float> a{1, 2, 3, 4}, b{5, 6, 7, 8}, c(4);
  kn::scalar::gemm_nn<float>(a.data(), 2, b.data(), 2, c.data(), 2, 2, 2, 2, false);
  CHECK(c == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("gemm variants agree with composed transposes") {
  Rng rng(11);
  const int m = 7, k = 13, n = 9;
  auto a = rand_vec<double>(m * k, rng);
  auto b = rand_vec<double>(k * n, rng);
  std::vector<double> c_nn(m * n), c_nt(m * n), c_tn(m * n);
  kn::scalar::gemm_nn<double>(a.data(), k, b.data(), n, c_nn.data(), n, m, k, n, false);

  // B^T stored row-major is [n x k]
  std::vector<double> bt(n * k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
  kn::scalar::gemm_nt<double>(a.data(), k, bt.data(), k, c_nt.data(), n, m, k, n, false);
  CHECK(max_rel_diff(c_nn, c_nt) < 1e-12);

  std::vector<double> at(k * m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) at[j * m + i] = a[i * k + j];
  // gemm_tn with A = at^T reproduces a * b
  kn::scalar::gemm_tn<double>(at.data(), m, b.data(), n, c_tn.data(), n, k, m, n, false);
  // c_tn is [m x n] here (k_param = m rows out)
  CHECK(max_rel_diff(c_nn, c_tn) < 1e-12);
}

TEST_CASE("avx2 kernels match scalar reference") {
  if (!kn::isa_supported(kn::Isa::avx2)) {
    MESSAGE("AVX2 not available; skipping equivalence checks");
    return;
  }
  Rng rng(42);
  // deliberately awkward sizes to exercise remainders
  const int m = 5, k = 67, n = 23;
  auto a32 = rand_vec<float>(m * k, rng);
  auto b32 = rand_vec<float>(k * n, rng);
  auto bt32 = rand_vec<float>(n * k, rng);

  SUBCASE("gemm_nn f32") {
    auto run = [&] {
      std::vector<float> c(m * n, 0.5f);
      kn::get_f32().gemm_nn(a32.data(), k, b32.data(), n, c.data(), n, m, k, n, true);
      return c;
    };
    CHECK(isa_divergence<float>(run) < 1e-5f);
  }
  SUBCASE("gemm_nt f32") {
    auto run = [&] {
      std::vector<float> c(m * n);
      kn::get_f32().gemm_nt(a32.data(), k, bt32.data(), k, c.data(), n, m, k, n, false);
      return c;
    };
    CHECK(isa_divergence<float>(run) < 1e-5f);
  }
  SUBCASE("gemm_tn f32") {
    auto run = [&] {
      std::vector<float> c(k * n, 1.0f);
      kn::get_f32().gemm_tn(a32.data(), k, b32.data(), n, c.data(), n, m, k, n, true);
      return c;
    };
    CHECK(isa_divergence<float>(run) < 1e-5f);
  }
  SUBCASE("gemm_nn f64") {
    auto a64 = rand_vec<double>(m * k, rng);
    auto b64 = rand_vec<double>(k * n, rng);
    auto run = [&] {
      std::vector<double> c(m * n);
      kn::get_f64().gemm_nn(a64.data(), k, b64.data(), n, c.data(), n, m, k, n, false);
      return c;
    };
    CHECK(isa_divergence<double>(run) < 1e-12);
  }
  SUBCASE("level-1 f32") {
    auto x = rand_vec<float>(133, rng);
    auto y = rand_vec<float>(133, rng);
    auto run = [&] {
      auto z = y;
      kn::get_f32().axpy(0.37f, x.data(), z.data(), 133);
      std::vector<float> extras{kn::get_f32().dot(x.data(), y.data(), 133),
                                kn::get_f32().reduce_sum(x.data(), 133),
                                kn::get_f32().reduce_max(x.data(), 133)};
      z.insert(z.end(), extras.begin(), extras.end());
      return z;
    };
    CHECK(isa_divergence<float>(run) < 1e-5f);
  }
  SUBCASE("softmax f32") {
    auto x = rand_vec<float>(97, rng);
    auto run = [&] {
      std::vector<float> y(97);
      kn::get_f32().softmax_row(x.data(), y.data(), 97);
      return y;
    };
    CHECK(isa_divergence<float>(run) < 1e-6f);
  }
}

TEST_CASE("softmax rows are non-negative and sum to 1") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + rng.below_int(40);
    auto x = rand_vec<double>(n, rng);
    std::vector<double> y(n);
    kn::get_f64().softmax_row(x.data(), y.data(), n);
    double s = 0;
    for (double v : y) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax handles -inf entries as exact zeros") {
  std::vector<double> x{0.0, -std::numeric_limits<double>::infinity(), 1.0};
  std::vector<double> y(3);
  kn::get_f64().softmax_row(x.data(), y.data(), 3);
  CHECK(y[1] == 0.0);
  CHECK(std::abs(y[0] + y[2] - 1.0) < 1e-12);
}

TEST_CASE("gelu gradient matches finite differences") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const double x = rng.uniform(-3.0, 3.0);
    const double h = 1e-6;
    double yp, ym;
    kn::scalar::gelu_fwd(&x, &yp, 1);
    const double xp = x + h, xm = x - h;
    kn::scalar::gelu_fwd(&xp, &yp, 1);
    kn::scalar::gelu_fwd(&xm, &ym, 1);
    const double fd = (yp - ym) / (2 * h);
    double g = 0, dy = 1;
    kn::scalar::gelu_bwd(&x, &dy, &g, 1);
    CHECK(std::abs(g - fd) < 1e-6);
  }
}
