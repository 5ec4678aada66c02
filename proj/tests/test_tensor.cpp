#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gecfuse/checkpoint.hpp"
#include "gecfuse/ops.hpp"
#include "gecfuse/optim.hpp"
#include "gecfuse/tensor.hpp"

#include "testutil.hpp"

#include <cstdio>
#include <filesystem>

using namespace gecfuse;
using testutil::grad_check;
using testutil::rand_tensor;
using D = Tensor<double>;

TEST_CASE("backward on linear identities") {
  // loss = sum(x), x shape [3] -> grad all ones
  auto x = D::from({3}, {1.0, 2.0, 3.0}, true);
  auto loss = sum(x);
  backward(loss);
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  // loss = sum(x*x), x = [2] -> grad = [4]
  auto y = D::from({1}, {2.0}, true);
  auto loss2 = sum(mul(y, y));
  backward(loss2);
  CHECK(loss2.item() == doctest::Approx(4.0));
  CHECK(y.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("backward accumulates across calls until grads are zeroed") {
  auto x = D::from({2}, {1.0, -1.0}, true);
  auto make_loss = [&] { return sum(mul(x, x)); };
  auto l1 = make_loss();
  backward(l1);
  const double g1 = x.grad()[0];
  auto l2 = make_loss();
  backward(l2);
  CHECK(x.grad()[0] == doctest::Approx(2 * g1));
  x.zero_grad();
  auto l3 = make_loss();
  backward(l3);
  CHECK(x.grad()[0] == doctest::Approx(g1));
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = D::from({2}, {1.0, 2.0}, true);
  auto y = add(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("finite differences: composite op graphs") {
  Rng rng(123);
  SUBCASE("matmul-gelu-layernorm-mean") {
    auto a = rand_tensor({4, 5}, rng);
    auto b = rand_tensor({5, 3}, rng);
    auto g = rand_tensor({3}, rng, 0.5, 1.5);
    auto c = rand_tensor({3}, rng, -0.2, 0.2);
    auto fwd = [&] { return mean(layer_norm(gelu(matmul(a, b)), g, c)); };
    auto res = grad_check({a, b, g, c}, fwd);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
  SUBCASE("linear and tied projection") {
    auto x = rand_tensor({3, 4}, rng);
    auto w = rand_tensor({4, 6}, rng);
    auto bias = rand_tensor({6}, rng);
    auto emb = rand_tensor({7, 4}, rng);
    auto vb = rand_tensor({7}, rng);
    auto fwd = [&] {
      auto h = linear(x, w, bias);
      auto t = linear_tied(x, emb, vb);
      return add(mean(gelu(h)), mean(mul(t, t)));
    };
    auto res = grad_check({x, w, bias, emb, vb}, fwd);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
  SUBCASE("softmax scale sub") {
    auto x = rand_tensor({4, 6}, rng);
    auto y = rand_tensor({4, 6}, rng);
    auto fwd = [&] { return mean(mul(softmax_rows(x), sub(scale(y, 1.7), x))); };
    auto res = grad_check({x, y}, fwd);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
  SUBCASE("embedding gather with repeated ids") {
    auto table = rand_tensor({6, 4}, rng);
    std::vector<int> ids{2, 0, 2, 5};
    auto g = rand_tensor({4}, rng, 0.5, 1.5);
    auto c = rand_tensor({4}, rng);
    auto fwd = [&] { return mean(layer_norm(embedding(table, ids), g, c)); };
    auto res = grad_check({table, g, c}, fwd);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
  SUBCASE("packed multi-head attention, causal and cross") {
    auto q = rand_tensor({5, 8}, rng);
    auto k = rand_tensor({7, 8}, rng);
    auto v = rand_tensor({7, 8}, rng);
    std::vector<int> qo{0, 2, 5}, ko{0, 3, 7};
    auto fwd = [&] { return mean(mha_packed(q, k, v, qo, ko, 2, false)); };
    auto res = grad_check({q, k, v}, fwd);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);

    auto s = rand_tensor({6, 8}, rng);
    std::vector<int> so{0, 3, 6};
    auto fwd2 = [&] { return mean(mha_packed(s, s, s, so, so, 4, true)); };
    auto res2 = grad_check({s}, fwd2);
    CHECK_MESSAGE(res2.max_rel_err < 1e-4, res2.worst);
  }
  SUBCASE("label smoothed cross entropy") {
    auto logits = rand_tensor({5, 7}, rng);
    std::vector<int> targets{3, 0, 0, 6, 1};  // pad id 0 -> rows 1,2 ignored
    auto fwd = [&] { return label_smoothed_ce(logits, targets, 0.1, 0); };
    auto res = grad_check({logits}, fwd);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
  SUBCASE("binary cross entropy with logits") {
    auto z = rand_tensor({6}, rng, -2.0, 2.0);
    std::vector<int> labels{1, 0, 0, 1, 1, 0};
    auto fwd = [&] { return bce_logits(z, labels); };
    auto res = grad_check({z}, fwd);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
  SUBCASE("dropout mask is honored by backward") {
    auto x = rand_tensor({4, 4}, rng);
    Rng drop_rng(77);
    auto y = dropout(x, 0.5, drop_rng);
    auto loss = mean(y);
    backward(loss);
    // grad is (mask * 2) / 16 elementwise
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double expect = (y.data()[i] == 0.0 && x.data()[i] != 0.0) ? 0.0 : 2.0 / 16.0;
      CHECK(x.grad()[i] == doctest::Approx(expect));
    }
  }
}

TEST_CASE("no-grad mode records no graph") {
  auto x = D::from({2}, {1.0, 2.0}, true);
  NoGradGuard ng;
  auto y = mul(x, x);
  CHECK(y.node()->parents.empty());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("label smoothed CE matches derived values") {
  SUBCASE("eps 0 equals plain cross-entropy") {
    auto logits = D::from({2, 3}, {0.3, -0.4, 1.1, 0.0, 0.2, -0.2}, true);
    std::vector<int> t{2, 1};
    const double a = label_smoothed_ce(logits, t, 0.0, -1).item();
    double want = 0;
    for (int i = 0; i < 2; ++i) {
      double lse = 0;
      for (int j = 0; j < 3; ++j) lse += std::exp(logits.at(i, j));
      want += std::log(lse) - logits.at(i, t[i]);
    }
    want /= 2;
    CHECK(a == doctest::Approx(want).epsilon(1e-10));
  }
  SUBCASE("uniform logits give log V for any smoothing") {
    auto logits = D::from({1, 5}, {0.7, 0.7, 0.7, 0.7, 0.7});
    std::vector<int> t{3};
    CHECK(label_smoothed_ce(logits, t, 0.0, -1).item() == doctest::Approx(std::log(5.0)));
    CHECK(label_smoothed_ce(logits, t, 0.3, -1).item() == doctest::Approx(std::log(5.0)));
  }
  SUBCASE("hand-computed binary case") {
    // vocab=2, logits=[2,0], gold=0, eps=0.1 -> 0.3268
    auto logits = D::from({1, 2}, {2.0, 0.0});
    std::vector<int> t{0};
    const double sigma = std::exp(2.0) / (std::exp(2.0) + 1.0);
    const double want = -(0.9 * std::log(sigma) + 0.1 * std::log(1.0 - sigma));
    const double got = label_smoothed_ce(logits, t, 0.1, -1).item();
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
    CHECK(got == doctest::Approx(0.3268).epsilon(1e-3));
  }
  SUBCASE("all positions padded is an error") {
    auto logits = D::from({2, 3}, {0., 0., 0., 0., 0., 0.});
    std::vector<int> t{0, 0};
    CHECK_THROWS_AS(label_smoothed_ce(logits, t, 0.1, 0), std::invalid_argument);
  }
}

TEST_CASE("adam step") {
  SUBCASE("zero gradient is a no-op on params") {
    auto p = D::from({3}, {0.5, -0.5, 1.0}, true);
    p.grad_data();  // zero-filled
    std::vector<D> params{p};
    auto st = AdamState<double>::init(params, 0.1, 0.9, 0.98, 1e-8);
    adam_step(params, st);
    CHECK(st.step_count == 1);
    CHECK(p.at(0) == doctest::Approx(0.5));
    CHECK(p.at(1) == doctest::Approx(-0.5));
    CHECK(p.at(2) == doctest::Approx(1.0));
  }
  SUBCASE("single hand-computed step") {
    // g=1, lr=0.1: bias-corrected m-hat = v-hat = 1 -> step ~ -0.1
    auto p = D::from({1}, {1.0}, true);
    p.grad_data()[0] = 1.0;
    std::vector<D> params{p};
    auto st = AdamState<double>::init(params, 0.1, 0.9, 0.98, 1e-8);
    adam_step(params, st);
    const double want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    CHECK(p.at(0) == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("identical params with identical grads stay identical") {
    auto a = D::from({2}, {0.3, -0.7}, true);
    auto b = D::from({2}, {0.3, -0.7}, true);
    for (int step = 0; step < 5; ++step) {
      a.zero_grad();
      b.zero_grad();
      a.grad_data()[0] = 0.2 * step;
      a.grad_data()[1] = -0.1;
      b.grad_data()[0] = 0.2 * step;
      b.grad_data()[1] = -0.1;
      std::vector<D> params{a, b};
      static auto st = AdamState<double>::init(params, 0.05, 0.9, 0.98, 1e-8);
      adam_step(params, st);
      CHECK(a.at(0) == b.at(0));
      CHECK(a.at(1) == b.at(1));
    }
  }
}

TEST_CASE("global norm clipping") {
  auto p = D::from({2}, {0.0, 0.0}, true);
  p.grad_data()[0] = 3.0;
  p.grad_data()[1] = 4.0;
  std::vector<D> params{p};
  const double norm = clip_global_norm(params, 0.1);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(std::hypot(p.grad()[0], p.grad()[1]) == doctest::Approx(0.1));
}

TEST_CASE("lr plateau schedule") {
  SUBCASE("improving losses never decay") {
    LrSchedule s{3e-5, 1e-6, 0.7, std::numeric_limits<double>::infinity()};
    double loss = 10.0;
    for (int e = 0; e < 20; ++e) {
      auto r = lr_plateau_step(s, loss);
      CHECK_FALSE(r.stop);
      CHECK(r.lr == doctest::Approx(3e-5));
      loss *= 0.9;
    }
  }
  SUBCASE("non-improving losses stop after ceil(log(min/lr)/log 0.7) decays") {
    LrSchedule s{3e-5, 1e-6, 0.7, 1.0};
    int decays = 0;
    bool stopped = false;
    for (int e = 0; e < 100 && !stopped; ++e) {
      auto r = lr_plateau_step(s, 2.0);
      ++decays;
      stopped = r.stop;
    }
    CHECK(stopped);
    CHECK(decays == 10);
  }
  SUBCASE("already below min stops immediately") {
    LrSchedule s{1e-7, 1e-6, 0.7, 1.0};
    auto r = lr_plateau_step(s, 0.5);
    CHECK(r.stop);
  }
}

TEST_CASE("checkpoint round-trip is bit exact") {
  Rng rng(9);
  std::map<std::string, Tensor<float>> m;
  m.emplace("b.weight", Tensor<float>::from({3, 4}, [&] {
              std::vector<float> v(12);
              for (auto& x : v) x = static_cast<float>(rng.normal());
              return v;
            }()));
  m.emplace("a.bias", Tensor<float>::from({4}, {0.1f, -0.2f, 0.3f, 1e-30f}));
  nlohmann::json meta;
  meta["model_kind"] = "mlm";
  meta["note"] = "round trip";

  const auto dir = std::filesystem::temp_directory_path() / "gecfuse_test_ckpt";
  std::filesystem::create_directories(dir);
  const std::string p1 = (dir / "one.ckpt").string();
  const std::string p2 = (dir / "two.ckpt").string();
  save_checkpoint(p1, m, meta);

  nlohmann::json meta2;
  auto loaded = load_checkpoint<float>(p1, &meta2);
  CHECK(meta2.at("model_kind") == "mlm");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.at("a.bias").vec() == m.at("a.bias").vec());
  CHECK(loaded.at("b.weight").shape() == std::vector<int>{3, 4});

  save_checkpoint(p2, loaded, meta2);
  CHECK(file_hash_hex(p1) == file_hash_hex(p2));

  // byte-level comparison, not just hash
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("f64 checkpoints load into f32 models and back") {
  std::map<std::string, Tensor<double>> m;
  m.emplace("w", Tensor<double>::from({2}, {0.25, -0.5}));
  const auto dir = std::filesystem::temp_directory_path() / "gecfuse_test_ckpt2";
  std::filesystem::create_directories(dir);
  const std::string p = (dir / "w.ckpt").string();
  save_checkpoint(p, m);
  auto as32 = load_checkpoint<float>(p);
  CHECK(as32.at("w").vec() == std::vector<float>{0.25f, -0.5f});
  std::filesystem::remove_all(dir);
}
