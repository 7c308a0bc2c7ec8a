#include <benchmark/benchmark.h>

#include "pivit/skelmap.hpp"
#include "pivit/trainer.hpp"

using namespace pivit;

namespace {

const std::vector<data::LabeledSample>& samples() {
  static const auto s = [] {
    data::SyntheticSpec spec;
    spec.clips_per_class = 4;
    return data::generate_synthetic(spec);
  }();
  return s;
}

void BM_Forward(benchmark::State& state) {
  backbone::PatchConfig c;
  c.attention = state.range(0) ? backbone::AttentionKind::Joint : backbone::AttentionKind::Divided;
  const backbone::VideoTransformer m(c, 1);
  const auto& clip = samples()[0].clip;
  for (auto _ : state) benchmark::DoNotOptimize(m.logits(clip));
  state.SetLabel(state.range(0) ? "joint" : "divided");
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_TokenMap(benchmark::State& state) {
  backbone::PatchConfig c;
  c.frames = 16;
  c.height = c.width = static_cast<std::size_t>(state.range(0));
  c.patch = 16;
  c.tau = 2;
  Rng rng(3);
  data::Skeleton2DSequence pose{c.frames, 17, {}};
  for (std::size_t t = 0; t < c.frames; ++t)
    for (std::size_t j = 0; j < 17; ++j)
      pose.entries.push_back({t, j, rng.uniform(0.0, double(c.width)), rng.uniform(0.0, double(c.height))});
  for (auto _ : state) benchmark::DoNotOptimize(skelmap::build_token_map(pose, c));
}
BENCHMARK(BM_TokenMap)->Arg(64)->Arg(224);

void BM_TrainStep(benchmark::State& state) {
  trainer::TrainConfig cfg;
  sim3d::ReferenceProviderConfig pc;
  const sim3d::ReferenceProvider provider(pc);
  if (!state.range(0)) {
    cfg.sim2d_layers.clear();
    cfg.sim3d_layers.clear();
  }
  trainer::Trainer t(cfg, &provider);
  const auto prepared = t.prepare(samples());
  std::vector<const trainer::PreparedSample*> batch;
  for (std::size_t i = 0; i < cfg.optim.batch_size; ++i) batch.push_back(&prepared[i]);
  t.reset_optimizer(1000000);
  for (auto _ : state) benchmark::DoNotOptimize(t.train_step(batch).total);
  state.SetLabel(state.range(0) ? "pivit" : "baseline");
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
