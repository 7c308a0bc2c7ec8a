#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "pivit/error.hpp"
#include "pivit/layers.hpp"
#include "pivit/ops.hpp"

using namespace pivit;
using namespace pivit::nn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.normal(0.0, scale);
  return t;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3, 4}, 1.5);
  CHECK(t.size() == 24);
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  CHECK(shape_string(t.shape()) == "[2x3x4]");
  CHECK(t.reshaped({4, 6}).cols() == 6);
  CHECK_THROWS(t.reshaped({5, 5}));
  CHECK(t.all_finite());
  t[3] = NAN;
  CHECK_FALSE(t.all_finite());
  CHECK(Tensor::scalar(2.0).item() == 2.0);
}

TEST_CASE("matmul agrees with a triple loop") {
  Rng rng(1);
  const Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  const Tensor c = matmul(Var::constant(a), Var::constant(b)).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) s += a(i, j) * b(j, k);
      CHECK(c(i, k) == doctest::Approx(s).epsilon(1e-12));
    }
  CHECK_THROWS_AS(matmul(Var::constant(a), Var::constant(a)), ContractError);
}

TEST_CASE("cross entropy") {
  SUBCASE("uniform logits give ln C") {
    const Var l = Var::constant(Tensor::row({0.3, 0.3, 0.3, 0.3}));
    for (std::size_t y = 0; y < 4; ++y) CHECK(cross_entropy(l, y).value().item() == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("saturated correct logit gives zero") {
    const Var l = Var::constant(Tensor::row({0.0, 1e6, 0.0, 0.0}));
    CHECK(cross_entropy(l, 1).value().item() == doctest::Approx(0.0));
  }
  SUBCASE("matches log-sum-exp on random logits") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> x(6);
      for (auto& v : x) v = rng.normal(0.0, 5.0);
      const std::size_t y = rng.index(6);
      const double want = oracle::log_sum_exp(x) - x[y];
      CHECK(std::abs(cross_entropy(Var::constant(Tensor::row(x)), y).value().item() - want) < 1e-10);
    }
  }
}

TEST_CASE("soft cross entropy of a distribution against itself is its entropy") {
  const std::vector<double> logits{0.2, -1.0, 2.5};
  const auto p = softmax(logits);
  double h = 0.0;
  for (double v : p) h -= v * std::log(v);
  CHECK(soft_cross_entropy(Var::constant(Tensor::row(logits)), Tensor::row(p)).value().item() ==
        doctest::Approx(h).epsilon(1e-12));
}

TEST_CASE("bce and squared error match elementwise sums") {
  Rng rng(3);
  const Tensor x = random_tensor({4, 3}, rng, 2.0);
  Tensor y({4, 3});
  for (auto& v : y.storage()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  double want = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    want += oracle::bce(x[i], y[i]);
    sq += (x[i] - y[i]) * (x[i] - y[i]);
  }
  CHECK(std::abs(bce_with_logits(Var::constant(x), y, 3.0).value().item() - want / 3.0) < 1e-12);
  CHECK(std::abs(squared_error(Var::constant(x), y, 2.0).value().item() - sq / 2.0) < 1e-12);
  Tensor mask({4, 3}, 0.0);
  mask[0] = mask[5] = 1.0;
  const double masked = ((x[0] - y[0]) * (x[0] - y[0]) + (x[5] - y[5]) * (x[5] - y[5]));
  CHECK(std::abs(masked_squared_error(Var::constant(x), y, mask, 1.0).value().item() - masked) < 1e-12);
}

TEST_CASE("grouped attention rows are convex weights") {
  Rng rng(4);
  const Var qkv = Var::constant(random_tensor({7, 3 * 8}, rng));
  const RowGroups groups{{0, 1, 2, 3}, {0, 4, 5, 6}, {2, 5}};
  std::vector<Tensor> maps;
  const Var out = grouped_attention(qkv, groups, 2, &maps);
  CHECK(out.value().rows() == 7);
  REQUIRE(maps.size() == groups.size() * 2);
  for (const auto& m : maps)
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < m.cols(); ++c) {
        CHECK(m(r, c) >= 0.0);
        s += m(r, c);
      }
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
}

TEST_CASE("grouped attention with a single key returns that value") {
  Rng rng(5);
  Tensor t = random_tensor({2, 6}, rng);
  const Var out = grouped_attention(Var::constant(t), {{1}}, 1);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(out.value()(1, c) == doctest::Approx(t(1, 4 + c)));
    CHECK(out.value()(0, c) == 0.0);
  }
}

TEST_CASE("row plumbing") {
  Rng rng(6);
  const Tensor x = random_tensor({4, 3}, rng);
  const Var g = gather_rows(Var::constant(x), {2, kZeroRow, 0});
  CHECK(g.value()(0, 1) == x(2, 1));
  CHECK(g.value()(1, 2) == 0.0);
  const Var m = segment_mean_rows(Var::constant(x), {{0, 1}, {3}});
  CHECK(m.value()(0, 0) == doctest::Approx(0.5 * (x(0, 0) + x(1, 0))));
  CHECK(m.value()(1, 2) == x(3, 2));
  const Var c = concat_cols({Var::constant(x), Var::constant(x)});
  CHECK(c.value().cols() == 6);
  CHECK(c.value()(3, 4) == x(3, 1));
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  Rng rng(7);
  LayerNorm ln(16);
  const Tensor x = random_tensor({5, 16}, rng, 3.0);
  const Tensor y = ln(Var::constant(x)).value();
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y(r, c) / 16.0;
    for (std::size_t c = 0; c < 16; ++c) v += (y(r, c) - m) * (y(r, c) - m) / 16.0;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  Rng rng(8);
  auto a = Var::parameter(random_tensor({3, 4}, rng));
  auto b = Var::parameter(random_tensor({4, 6}, rng));
  auto bias = Var::parameter(random_tensor({1, 6}, rng));
  auto gamma = Var::parameter(random_tensor({1, 6}, rng));
  auto beta = Var::parameter(random_tensor({1, 6}, rng));
  ParamList params{{"a", a}, {"b", b}, {"bias", bias}, {"gamma", gamma}, {"beta", beta}};
  const Tensor target = random_tensor({2, 2}, rng);
  auto loss = [&] {
    Var h = add_bias(matmul(a, b), bias);
    h = layer_norm(gelu(h), gamma, beta);
    Var att = grouped_attention(h, {{0, 1, 2}, {1, 2}}, 2);
    Var pooled = segment_mean_rows(concat_rows({att, gather_rows(att, {2, 0})}), {{0, 3}, {1, 2, 4}});
    Var l = add(cross_entropy(gather_rows(pooled, {0}), 1), squared_error(pooled, target, 4.0));
    return add(l, scale(sum(mul(relu(sub(pooled, Var::constant(target))), pooled)), 0.1));
  };
  const auto r = oracle::finite_difference(params, loss, 40, 9);
  INFO("worst " << r.worst);
  CHECK(r.max_rel_error < 1e-5);
  CHECK(r.nonzero > 20);
}

TEST_CASE("no-grad guard records no graph") {
  auto p = Var::parameter(Tensor::row({1.0, 2.0}));
  {
    NoGradGuard g;
    CHECK(NoGradGuard::active());
    const Var y = scale(p, 2.0);
    CHECK(y.node()->parents.empty());
  }
  CHECK_FALSE(NoGradGuard::active());
}

TEST_CASE("momentum sgd follows the recurrence") {
  auto p = Var::parameter(Tensor::row({1.0}));
  SgdMomentum::Options o;
  o.lr = 0.1;
  o.momentum = 0.5;
  o.cosine = false;
  o.total_steps = 10;
  SgdMomentum opt({{"p", p}}, o);
  double v = 0.0, w = 1.0;
  for (int s = 0; s < 3; ++s) {
    p.grad()[0] = 2.0 * w;  // d/dw of w^2
    opt.step();
    v = 0.5 * v + 2.0 * w;
    w -= 0.1 * v;
    CHECK(p.value()[0] == doctest::Approx(w).epsilon(1e-14));
    CHECK(p.grad()[0] == 0.0);
  }
}

TEST_CASE("cosine schedule decays to zero after warmup") {
  auto p = Var::parameter(Tensor::row({0.0}));
  SgdMomentum::Options o;
  o.lr = 1.0;
  o.total_steps = 11;
  o.warmup_steps = 3;
  SgdMomentum opt({{"p", p}}, o);
  std::vector<double> lrs;
  for (int s = 0; s < 11; ++s) {
    lrs.push_back(opt.learning_rate());
    opt.step();
  }
  CHECK(lrs[0] < lrs[1]);
  CHECK(lrs[2] == doctest::Approx(1.0));
  for (std::size_t i = 4; i < lrs.size(); ++i) CHECK(lrs[i] <= lrs[i - 1] + 1e-15);
  CHECK(lrs.back() < 0.05);
}
