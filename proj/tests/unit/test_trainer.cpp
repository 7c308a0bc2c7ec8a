#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "pivit/error.hpp"
#include "pivit/ops.hpp"
#include "pivit/trainer.hpp"

using namespace pivit;
using namespace pivit::trainer;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.model.frames = 4;
  c.model.height = c.model.width = 32;
  c.model.patch = 8;
  c.model.d_v = 16;
  c.model.heads = 2;
  c.model.layers = 2;
  c.sim2d_layers = {1};
  c.sim3d_layers = {2};
  c.sim3d.tap_layer = 2;
  c.sim3d.d_s = 8;
  c.optim.batch_size = 4;
  c.optim.epochs = 1;
  return c;
}

sim3d::ReferenceProviderConfig provider_config() {
  sim3d::ReferenceProviderConfig p;
  p.d_s = 8;
  return p;
}

const std::vector<data::LabeledSample>& samples() {
  static const auto s = [] {
    data::SyntheticSpec spec;
    spec.clips_per_class = 3;
    spec.seed = 21;
    return data::generate_synthetic(spec);
  }();
  return s;
}

double softmax_entropy(const std::vector<double>& logits) {
  const auto p = nn::softmax(logits);
  double h = 0.0;
  for (double v : p) h -= v > 0.0 ? v * std::log(v) : 0.0;
  return h;
}

std::vector<double> flat_values(const nn::ParamList& params) {
  std::vector<double> out;
  for (const auto& p : params)
    for (double v : p.var.value().values()) out.push_back(v);
  return out;
}

}  // namespace

TEST_CASE("total loss is the weighted sum of its parts") {
  const sim3d::ReferenceProvider provider(provider_config());
  auto cfg = small_config();
  cfg.weights = {0.7, 1.3, 0.4, 1.0};
  Trainer t(cfg, &provider);
  const auto prepared = t.prepare(samples());
  for (const auto& s : prepared) {
    const auto v = t.model().losses(s).values();
    CHECK(v.l_2d > 0.0);
    CHECK(v.l_3d_align > 0.0);
    CHECK(v.l_3d_cls > 0.0);
    CHECK(v.total == doctest::Approx(0.7 * v.l_v_cls + 1.3 * v.l_2d + 0.4 * (v.l_3d_align + v.l_3d_cls)).epsilon(1e-13));
    CHECK(v.total == doctest::Approx(v.weighted_sum(cfg.weights)).epsilon(1e-14));
  }

  cfg.weights = {1.0, 0.0, 0.0, 1.0};
  Trainer only_cls(cfg, &provider);
  for (const auto& s : only_cls.prepare(samples())) {
    const auto v = only_cls.model().losses(s).values();
    CHECK(v.total == v.l_v_cls);
  }
}

TEST_CASE("classification loss of the composite equals the backbone loss") {
  const sim3d::ReferenceProvider provider(provider_config());
  Trainer t(small_config(), &provider);
  for (const auto& s : t.prepare(samples()))
    CHECK(t.model().losses(s).values().l_v_cls ==
          doctest::Approx(backbone::loss_cls(t.model().backbone().logits(s.sample->clip), s.sample->clip.label))
              .epsilon(1e-12));
}

TEST_CASE("one small step lowers the batch loss for most seeds") {
  const sim3d::ReferenceProvider provider(provider_config());
  int lowered = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = small_config();
    cfg.seed = seed;
    cfg.optim.lr = 1e-3;
    cfg.optim.momentum = 0.0;
    cfg.optim.weight_decay = 0.0;
    cfg.optim.warmup_steps = 0;
    cfg.optim.grad_clip = 0.0;
    Trainer t(cfg, &provider);
    const auto prepared = t.prepare(samples());
    std::vector<const PreparedSample*> batch;
    for (std::size_t i = 0; i < prepared.size(); i += 3) batch.push_back(&prepared[i]);
    t.reset_optimizer(1);
    const double before = batch_losses(t.model(), batch).total;
    t.train_step(batch);
    const double after = batch_losses(t.model(), batch).total;
    lowered += after < before;
  }
  CHECK(lowered >= 8);
}

TEST_CASE("KD baselines") {
  const sim3d::ReferenceProvider provider(provider_config());

  SUBCASE("logit distillation against its own logits is the teacher entropy") {
    auto cfg = small_config();
    cfg.kd = KdBaseline::LDClass;
    Trainer t(cfg, &provider);
    auto prepared = t.prepare(samples());
    for (auto& s : prepared) {
      REQUIRE(s.probe_logits.size() == 4);
      const double kd = t.model().losses(s).values().l_kd;
      CHECK(kd >= softmax_entropy(s.probe_logits) - 1e-12);
      s.probe_logits = t.model().backbone().logits(s.sample->clip);
      CHECK(t.model().losses(s).values().l_kd == doctest::Approx(softmax_entropy(s.probe_logits)).epsilon(1e-12));
    }
  }

  SUBCASE("feature distillation on the class token is an MSE") {
    auto cfg = small_config();
    cfg.kd = KdBaseline::FDClass;
    Trainer t(cfg, &provider);
    const auto prepared = t.prepare(samples());
    auto& m = t.model();
    const auto& W = m.fd_adapter().weight.value();
    const auto& b = m.fd_adapter().bias.value();
    for (const auto& s : prepared) {
      const Tensor z = m.backbone().forward_with_taps(s.sample->clip, {2}).taps.at(2).tokens;
      const Tensor target = sim3d::pool_targets(*s.features, sim3d::AlignmentLevel::Global);
      double want = 0.0;
      for (std::size_t o = 0; o < 8; ++o) {
        double y = b[o];
        for (std::size_t i = 0; i < 16; ++i) y += z(0, i) * W(i, o);
        want += (y - target[o]) * (y - target[o]) / 8.0;
      }
      const auto v = m.losses(s).values();
      CHECK(v.l_kd == doctest::Approx(want).epsilon(1e-10));
      CHECK(v.l_2d == 0.0);
      CHECK(v.l_3d_align == 0.0);
    }
  }

  SUBCASE("distillation-token baselines add one token") {
    auto cfg = small_config();
    const std::size_t base_rows = cfg.model.token_rows();
    for (auto kd : {KdBaseline::FDDistill, KdBaseline::LDDistill}) {
      cfg.kd = kd;
      CHECK(cfg.effective_model().token_rows() == base_rows + 1);
      Trainer t(cfg, &provider);
      const auto prepared = t.prepare(samples());
      CHECK(std::isfinite(t.model().losses(prepared[0]).values().l_kd));
    }
    cfg.kd = KdBaseline::FDClass;
    CHECK(cfg.effective_model().token_rows() == base_rows);
  }

  SUBCASE("names") {
    for (auto k : {KdBaseline::None, KdBaseline::FDClass, KdBaseline::FDDistill, KdBaseline::LDClass,
                   KdBaseline::LDDistill})
      CHECK(parse_kd(to_string(k)) == k);
    CHECK_THROWS_AS(parse_kd("fd"), ConfigError);
  }
}

TEST_CASE("induction modules are side branches") {
  const sim3d::ReferenceProvider provider(provider_config());
  auto with = small_config();
  auto without = small_config();
  without.sim2d_layers.clear();
  without.sim3d_layers.clear();
  PiVit a(with, 5), b(without, 5);
  CHECK(a.parameters().size() > b.parameters().size());
  for (const auto& s : samples()) CHECK(a.backbone().logits(s.clip) == b.backbone().logits(s.clip));
}

TEST_CASE("stripping") {
  const sim3d::ReferenceProvider provider(provider_config());
  auto cfg = small_config();
  Trainer t(cfg, &provider);
  t.fit(t.prepare(samples()));
  const auto& m = t.model();
  const auto stripped = strip(m);
  const backbone::VideoTransformer baseline(cfg.model, 77);

  CHECK(stripped.parameter_count() == baseline.parameter_count());
  CHECK(stripped.macs() == baseline.macs());
  for (const auto& s : samples()) CHECK(stripped.logits(s.clip) == m.backbone().logits(s.clip));

  const auto full = training_checkpoint(m);
  CHECK(full.has_train_only());
  const auto slim = strip_checkpoint(full);
  CHECK_FALSE(slim.has_train_only());
  for (const auto& e : slim.entries) CHECK(e.name.rfind("backbone.", 0) == 0);
  CHECK(slim.entries.size() == stripped.parameters().size());

  const auto dir = std::filesystem::temp_directory_path() / "pivit_test_trainer";
  std::filesystem::create_directories(dir);
  ckpt::save(dir / "full.ckpt", full);
  ckpt::save(dir / "slim.ckpt", slim);
  const auto from_full = load_backbone(ckpt::load(dir / "full.ckpt"));
  const auto from_slim = load_backbone(ckpt::load(dir / "slim.ckpt"));
  CHECK(std::filesystem::file_size(dir / "slim.ckpt") < std::filesystem::file_size(dir / "full.ckpt"));
  for (const auto& s : samples()) {
    CHECK(from_full.logits(s.clip) == stripped.logits(s.clip));
    CHECK(from_slim.logits(s.clip) == stripped.logits(s.clip));
  }

  const auto reloaded = load_pivit(ckpt::load(dir / "full.ckpt"));
  const auto prepared = t.prepare(samples());
  CHECK(reloaded->losses(prepared[0]).values().total == m.losses(prepared[0]).values().total);
  CHECK_THROWS_AS(load_pivit(slim), ContractError);
}

TEST_CASE("training is deterministic and leaves the provider untouched") {
  const sim3d::ReferenceProvider provider(provider_config());
  const auto hash = provider.weight_hash();
  auto run = [&] {
    Trainer t(small_config(), &provider);
    std::vector<double> totals;
    t.fit(t.prepare(samples()), [&](const StepRecord& r) { totals.push_back(r.loss.total); });
    return std::make_pair(flat_values(t.model().parameters()), totals);
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.second.size() == 3);
  CHECK(provider.weight_hash() == hash);
}

TEST_CASE("prepare") {
  const sim3d::ReferenceProvider provider(provider_config());

  SUBCASE("feature noise shifts every target by a non-negative amount") {
    auto cfg = small_config();
    cfg.noise.feature = 2.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      cfg.seed = seed;
      Trainer t(cfg, &provider);
      const auto noisy = t.prepare(samples());
      for (const auto& s : noisy) {
        const auto clean = provider.produce(*s.sample->pose3d);
        const Tensor a = sim3d::pool_targets(clean, sim3d::AlignmentLevel::Global);
        const Tensor b = sim3d::pool_targets(*s.features, sim3d::AlignmentLevel::Global);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] >= a[i]);
        CHECK(sim3d::loss_align(a, b) > 0.0);
      }
    }
  }

  SUBCASE("missing pose streams are reported") {
    auto stripped = samples();
    stripped[1].pose3d.reset();
    Trainer t(small_config(), &provider);
    CHECK_THROWS_AS(t.prepare(stripped), DataError);
    stripped = samples();
    stripped[2].pose2d.reset();
    CHECK_THROWS_AS(t.prepare(stripped), DataError);
  }

  SUBCASE("provider is required when 3D-SIM is on") {
    CHECK_THROWS_AS(Trainer(small_config(), nullptr), ConfigError);
    auto cfg = small_config();
    cfg.sim3d_layers.clear();
    CHECK_NOTHROW(Trainer(cfg, nullptr));
  }
}

TEST_CASE("late fusion") {
  const std::vector<double> a{2.0, 0.0, -1.0}, b{-1.0, 3.0, 0.5};
  const auto f = late_fuse(a, b);
  CHECK(std::accumulate(f.begin(), f.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-14));
  const auto pa = nn::softmax(a), pb = nn::softmax(b);
  for (std::size_t i = 0; i < 3; ++i) CHECK(f[i] == doctest::Approx(0.5 * (pa[i] + pb[i])).epsilon(1e-14));
  const auto rgb_only = late_fuse(a, b, {1.0, 0.0});
  for (std::size_t i = 0; i < 3; ++i) CHECK(rgb_only[i] == doctest::Approx(pa[i]).epsilon(1e-14));
  const auto x = late_fuse(a, b, {0.3, 0.7}), y = late_fuse(a, b, {3.0, 7.0});
  for (std::size_t i = 0; i < 3; ++i) CHECK(x[i] == doctest::Approx(y[i]).epsilon(1e-14));
  CHECK_THROWS_AS(late_fuse(a, b, {0.0, 0.0}), ConfigError);
}

TEST_CASE("holdout split") {
  auto [train, hold] = split_holdout(samples(), 1);
  CHECK(train.size() == 8);
  CHECK(hold.size() == 4);
  for (std::size_t c = 0; c < 4; ++c) CHECK(hold[c].clip.label == c);
}
