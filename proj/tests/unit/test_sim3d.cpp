#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"
#include "pivit/error.hpp"
#include "pivit/sim3d.hpp"
#include "pivit/trainer.hpp"

using namespace pivit;
using namespace pivit::sim3d;

namespace {

SkeletonFeatures random_features(std::size_t T, std::size_t J, std::size_t D, Rng& rng) {
  SkeletonFeatures f{Tensor({T, J, D})};
  for (auto& v : f.y.storage()) v = rng.normal();
  return f;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t({r, c});
  for (auto& v : t.storage()) v = rng.normal();
  return t;
}

backbone::PatchConfig small_model() {
  backbone::PatchConfig c;
  c.frames = 4;
  c.height = c.width = 8;
  c.patch = 4;
  c.d_v = 8;
  c.heads = 2;
  c.layers = 2;
  return c;
}

}  // namespace

TEST_CASE("target pooling") {
  SkeletonFeatures constant{Tensor({3, 4, 5}, 1.25)};
  for (auto level : {AlignmentLevel::Global, AlignmentLevel::Local}) {
    const Tensor pooled = pool_targets(constant, level);
    for (double v : pooled.values()) CHECK(v == doctest::Approx(1.25).epsilon(1e-15));
  }

  SkeletonFeatures tiny{Tensor({2, 2, 1}, std::vector<double>{1, 2, 3, 4})};
  CHECK(pool_targets(tiny, AlignmentLevel::Global).item() == 2.5);

  Rng rng(1);
  const auto f = random_features(5, 3, 4, rng);
  const Tensor local = pool_targets(f, AlignmentLevel::Local);
  REQUIRE(local.rows() == 5);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 4; ++c) {
      double m = 0.0;
      for (std::size_t j = 0; j < 3; ++j) m += f.at(t, j, c);
      CHECK(std::abs(local(t, c) - m / 3.0) < 1e-12);
    }
}

TEST_CASE("visual pooling") {
  backbone::PatchConfig c = small_model();
  c.distill_token = true;
  Rng rng(2);
  const Tensor z = random_matrix(c.token_rows(), c.d_v, rng);

  const Tensor local = pool_visual(backbone::TokenTensor{z, 1}, c, AlignmentLevel::Local);
  REQUIRE(local.rows() == c.temporal_tokens());
  REQUIRE(local.cols() == c.d_v);
  for (std::size_t tv = 0; tv < c.temporal_tokens(); ++tv)
    for (std::size_t k = 0; k < c.d_v; ++k) {
      double m = 0.0;
      for (std::size_t s = 0; s < c.spatial_tokens(); ++s) m += z(c.token_row(tv, s), k);
      CHECK(std::abs(local(tv, k) - m / double(c.spatial_tokens())) < 1e-12);
    }

  // Global pooling ignores order of the patch rows and the extra tokens.
  const Tensor global = pool_visual(backbone::TokenTensor{z, 1}, c, AlignmentLevel::Global);
  Tensor shuffled = z;
  std::vector<std::size_t> rows;
  for (std::size_t r = 1; r <= c.patch_tokens(); ++r) rows.push_back(r);
  for (std::size_t i = rows.size(); i > 1; --i) std::swap(rows[i - 1], rows[rng.index(i)]);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < c.d_v; ++k) shuffled(1 + r, k) = z(rows[r], k);
  for (std::size_t k = 0; k < c.d_v; ++k) {
    shuffled(0, k) = 99.0;
    shuffled(c.distill_row(), k) = -99.0;
  }
  const Tensor g2 = pool_visual(backbone::TokenTensor{shuffled, 1}, c, AlignmentLevel::Global);
  for (std::size_t k = 0; k < c.d_v; ++k) CHECK(std::abs(global[k] - g2[k]) < 1e-12);
}

TEST_CASE("reconcile_time index sets") {
  CHECK(reconcile_indices(8, 4) == std::vector<std::size_t>{0, 2, 4, 6});
  CHECK(reconcile_indices(2, 4) == std::vector<std::size_t>{0, 1, 1, 1});
  CHECK(reconcile_indices(4, 4) == std::vector<std::size_t>{0, 1, 2, 3});
  const Tensor y({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor r = reconcile_time(y, 5);
  CHECK(r.rows() == 5);
  CHECK(r(4, 1) == 6.0);
  CHECK(r(1, 0) == 3.0);
}

TEST_CASE("FC projection equals an explicit matrix-vector product") {
  Sim3DConfig cfg;
  Sim3DHead head(cfg, 64, 4, 3);
  Rng rng(4);
  const Tensor x = random_matrix(1, 64, rng);
  const Tensor y = head.project(nn::Var::constant(x), AlignmentLevel::Global).value();
  REQUIRE(y.cols() == 32);
  const auto& W = head.global_fc().weight.value();
  const auto& b = head.global_fc().bias.value();
  for (std::size_t o = 0; o < 32; ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < 64; ++i) s += x[i] * W(i, o);
    CHECK(std::abs(y[o] - s) < 1e-12);
  }
  head.global_fc().weight.mutable_value().fill(0.0);
  head.global_fc().bias.mutable_value().fill(0.0);
  const Tensor zero = head.project(nn::Var::constant(x), AlignmentLevel::Global).value();
  for (double v : zero.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(head.project(nn::Var::constant(random_matrix(1, 7, rng)), AlignmentLevel::Global), ContractError);
}

TEST_CASE("alignment loss") {
  const Tensor t = Tensor::row({1.0, 3.0});
  CHECK(loss_align(t, Tensor::row({2.0, 2.0})) == 1.0);
  CHECK(loss_align(t, t) == 0.0);
  CHECK(loss_align(t, Tensor::row({2.0, 2.0}), Reduction::Sum) == 2.0);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_matrix(4, 6, rng), b = random_matrix(4, 6, rng);
    double s = 0.0;
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 6; ++c) s += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
    CHECK(std::abs(loss_align(a, b) - s / 24.0) < 1e-10);
    CHECK(loss_align(a, b) >= 0.0);
    CHECK(loss_align(a, a) == 0.0);
  }
  CHECK_THROWS_AS(loss_align(t, Tensor::row({1.0})), ContractError);
}

TEST_CASE("L_3D classifier toggle") {
  Rng rng(6);
  const Tensor target = random_matrix(1, 4, rng);
  const auto pred = nn::Var::constant(random_matrix(1, 4, rng));
  nn::Linear zero_head(4, 4, rng);
  zero_head.weight.mutable_value().fill(0.0);
  const double align = loss_align(target, pred.value());
  CHECK(loss_3d(target, pred, 2, zero_head, false).total.value().item() == align);
  CHECK(loss_3d(target, pred, 2, zero_head, true).total.value().item() ==
        doctest::Approx(align + std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("3D-SIM head gradients match finite differences") {
  const auto c = small_model();
  Rng rng(7);
  const auto z = nn::Var::constant(random_matrix(c.token_rows(), c.d_v, rng));
  const auto feats = random_features(6, 3, 5, rng);
  for (auto level : {AlignmentLevel::Global, AlignmentLevel::Local, AlignmentLevel::GlobalLocal})
    for (auto kind : {HeadKind::FC, HeadKind::MLP, HeadKind::Transformer}) {
      Sim3DConfig cfg;
      cfg.alignment = level;
      cfg.head_kind = kind;
      cfg.d_s = 5;
      Sim3DHead head(cfg, c.d_v, 3, 8);
      nn::ParamList params;
      head.collect(params, "h");
      for (auto& p : params)
        for (auto& v : p.var.mutable_value().storage()) v += rng.normal(0.0, 0.1);
      const auto align = oracle::finite_difference(params, [&] { return head.losses(z, c, feats, 1).align; }, 20, 9);
      const auto cls = oracle::finite_difference(params, [&] { return head.losses(z, c, feats, 1).cls; }, 20, 10);
      const auto total = oracle::finite_difference(params, [&] { return head.losses(z, c, feats, 1).total; }, 20, 11);
      INFO(to_string(level) << "/" << to_string(kind) << " " << align.worst << " " << cls.worst);
      CHECK(align.max_rel_error <= 1e-5);
      CHECK(cls.max_rel_error <= 1e-5);
      CHECK(total.max_rel_error <= 1e-5);
    }
}

TEST_CASE("feature width mismatch is a contract error") {
  const auto c = small_model();
  Sim3DConfig cfg;
  cfg.d_s = 5;
  Sim3DHead head(cfg, c.d_v, 3, 1);
  Rng rng(12);
  const auto z = nn::Var::constant(random_matrix(c.token_rows(), c.d_v, rng));
  CHECK_THROWS_AS(head.losses(z, c, random_features(4, 3, 6, rng), 0), ContractError);
}

TEST_CASE("feature noise") {
  Rng rng(13);
  const auto f = random_features(4, 5, 3, rng);
  const std::vector<double> sigma{1.0, 2.0, 0.5};
  CHECK(add_feature_noise(f, 0.0, sigma, 1).y == f.y);
  CHECK(add_feature_noise(f, 2.0, sigma, 1).y == add_feature_noise(f, 2.0, sigma, 1).y);
  const auto noisy = add_feature_noise(f, 2.0, sigma, 1);
  for (std::size_t i = 0; i < f.y.size(); ++i) {
    const double d = noisy.y[i] - f.y[i];
    CHECK(d >= 0.0);
    CHECK(d <= 2.0 * sigma[i % 3] + 1e-12);
  }
  CHECK_THROWS_AS(add_feature_noise(f, -1.0, sigma, 1), ConfigError);

  const auto s = channel_std({f});
  REQUIRE(s.size() == 3);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t r = 0; r < 20; ++r) m += f.y[r * 3 + c] / 20.0;
    for (std::size_t r = 0; r < 20; ++r) v += (f.y[r * 3 + c] - m) * (f.y[r * 3 + c] - m) / 20.0;
    CHECK(s[c] == doctest::Approx(std::sqrt(v)).epsilon(1e-12));
  }
}

TEST_CASE("reference provider") {
  data::SyntheticSpec spec;
  spec.seed = 3;
  spec.clips_per_class = 24;
  auto [train, hold] = trainer::split_holdout(data::generate_synthetic(spec), 8);
  ReferenceProviderConfig cfg;
  PretrainReport report;
  const auto provider = ReferenceProvider::pretrain(train, hold, cfg, &report);

  SUBCASE("probe accuracy on held-out skeletons") {
    INFO("train " << report.train_accuracy << " holdout " << report.holdout_accuracy);
    CHECK(report.holdout_accuracy >= 0.9);
    CHECK(report.epoch_loss.size() == cfg.epochs);
  }
  SUBCASE("shape and determinism") {
    const auto a = provider->produce(*hold[0].pose3d), b = provider->produce(*hold[0].pose3d);
    CHECK(a.frames() == 4);
    CHECK(a.joints() == 5);
    CHECK(a.width() == 32);
    CHECK(a.y == b.y);
    CHECK(provider->descriptor().d_s == 32);
  }
  SUBCASE("checkpoint round-trip keeps outputs and hash") {
    const auto path = std::filesystem::temp_directory_path() / "pivit_test_provider.ckpt";
    provider->save(path);
    const auto back = ReferenceProvider::load(path);
    CHECK(back->weight_hash() == provider->weight_hash());
    CHECK(back->produce(*hold[1].pose3d).y == provider->produce(*hold[1].pose3d).y);
    CHECK(back->probe_logits(*hold[1].pose3d) == provider->probe_logits(*hold[1].pose3d));
  }
  SUBCASE("wrong joint count") {
    data::Skeleton3DSequence p{4, 3, {}};
    CHECK_THROWS_AS(provider->produce(p), ContractError);
  }
}

TEST_CASE("feature cache round-trip at f32 precision") {
  Rng rng(14);
  const auto f = random_features(4, 5, 6, rng);
  const auto path = std::filesystem::temp_directory_path() / "pivit_test.feat";
  write_feature_cache(path, f, {"reference", 6, "native"}, 0xabcdefULL);
  FeatureCacheHeader h;
  const auto back = read_feature_cache(path, &h);
  CHECK(h.provider == "reference");
  CHECK(h.weight_hash == 0xabcdefULL);
  CHECK(h.frames == 4);
  CHECK(h.width == 6);
  for (std::size_t i = 0; i < f.y.size(); ++i) CHECK(back.y[i] == static_cast<double>(static_cast<float>(f.y[i])));
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(read_feature_cache(path), ParseError);
}

TEST_CASE("level names") {
  for (auto l : {AlignmentLevel::Global, AlignmentLevel::Local, AlignmentLevel::GlobalLocal})
    CHECK(parse_level(to_string(l)) == l);
  CHECK_THROWS_AS(parse_level("both"), ConfigError);
}
