#include "pivit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "pivit/binio.hpp"
#include "pivit/error.hpp"
#include "parallel.hpp"

namespace pivit::trainer {

using nlohmann::json;

namespace {

std::uint64_t sample_seed(std::uint64_t seed, const std::string& id, std::uint64_t stream) {
  return Rng(seed ^ binio::fnv1a(id.data(), id.size())).fork(stream).seed();
}

nn::Var accumulate(const nn::Var& acc, const nn::Var& term) { return acc.defined() ? nn::add(acc, term) : term; }

double value_of(const nn::Var& v) { return v.defined() ? v.value()[0] : 0.0; }

}  // namespace

// ---------------------------------------------------------------------------
// LossBundle

double LossBundle::weighted_sum(const LossWeights& w) const {
  double t = l_v_cls * w.cls;
  t = t + l_2d * w.sim2d;
  t = t + (l_3d_align + l_3d_cls) * w.sim3d;
  return t + l_kd * w.kd;
}

bool LossBundle::all_finite() const {
  for (double v : {l_v_cls, l_2d, l_3d_align, l_3d_cls, l_kd, total})
    if (!std::isfinite(v)) return false;
  return true;
}

LossBundle& LossBundle::operator+=(const LossBundle& o) {
  l_v_cls += o.l_v_cls;
  l_2d += o.l_2d;
  l_3d_align += o.l_3d_align;
  l_3d_cls += o.l_3d_cls;
  l_kd += o.l_kd;
  total += o.total;
  return *this;
}

LossBundle LossBundle::scaled(double s) const {
  return {l_v_cls * s, l_2d * s, l_3d_align * s, l_3d_cls * s, l_kd * s, total * s};
}

json LossBundle::to_json() const {
  return {{"l_v_cls", l_v_cls}, {"l_2d", l_2d},  {"l_3d_align", l_3d_align},
          {"l_3d_cls", l_3d_cls}, {"l_kd", l_kd}, {"total", total}};
}

json StepRecord::to_json() const {
  json j = {{"step", step}, {"epoch", epoch}, {"batch", batch}, {"lr", lr}};
  j.update(loss.to_json());
  return j;
}

// ---------------------------------------------------------------------------
// Model

PiVit::PiVit(const TrainConfig& cfg, std::uint64_t seed) : cfg_(cfg), backbone_(cfg.effective_model(), seed) {
  cfg_.validate();
  const Rng root(seed);
  const std::size_t d_v = cfg_.model.d_v;
  if (cfg_.uses_2d())
    for (std::size_t i = 0; i < cfg_.sim2d_layers.size(); ++i) {
      sim2d::Sim2DConfig c = cfg_.sim2d;
      c.tap_layer = cfg_.sim2d_layers[i];
      sim2d_.emplace_back(c, d_v, cfg_.joints, root.fork(0x2D00 + i).seed());
    }
  if (cfg_.uses_3d())
    for (std::size_t i = 0; i < cfg_.sim3d_layers.size(); ++i) {
      sim3d::Sim3DConfig c = cfg_.sim3d;
      c.tap_layer = cfg_.sim3d_layers[i];
      sim3d_.emplace_back(c, d_v, cfg_.model.classes, root.fork(0x3D00 + i).seed());
    }
  Rng kd_rng = root.fork(0xCD);
  if (cfg_.kd == KdBaseline::FDClass || cfg_.kd == KdBaseline::FDDistill)
    fd_adapter_ = nn::Linear(d_v, cfg_.sim3d.d_s, kd_rng);
  if (cfg_.kd == KdBaseline::LDDistill) distill_head_ = nn::Linear(d_v, cfg_.model.classes, kd_rng);
}

LossBundle PiVit::Graph::values() const {
  return {value_of(l_v_cls), value_of(l_2d), value_of(l_3d_align), value_of(l_3d_cls), value_of(l_kd), value_of(total)};
}

PiVit::Graph PiVit::losses(const PreparedSample& s) const {
  const data::LabeledSample& sample = *s.sample;
  const std::size_t label = sample.clip.label;
  const backbone::PatchConfig& mc = backbone_.config();
  std::set<std::size_t> taps;
  for (const auto& h : sim2d_) taps.insert(h.config().tap_layer);
  for (const auto& h : sim3d_) taps.insert(h.config().tap_layer);
  if (cfg_.kd != KdBaseline::None) taps.insert(mc.layers);

  backbone::VideoTransformer::Trace trace = backbone_.run(sample.clip, taps);
  Graph g;
  g.l_v_cls = backbone::loss_cls(trace.logits, label);

  if (!sim2d_.empty() && !s.map) throw DataError("sample '" + sample.clip.id + "' has no token-skeleton map");
  for (const auto& head : sim2d_) {
    auto pred = head.predict(trace.taps.at(head.config().tap_layer), mc);
    g.l_2d = accumulate(g.l_2d, sim2d::loss_2d(pred, *s.map, head.config().reduction, head.config().depth_weight));
  }

  if (!sim3d_.empty() && !s.features) throw DataError("sample '" + sample.clip.id + "' has no skeleton features");
  for (const auto& head : sim3d_) {
    auto l = head.losses(trace.taps.at(head.config().tap_layer), mc, *s.features, label);
    g.l_3d_align = accumulate(g.l_3d_align, l.align);
    if (l.cls.defined()) g.l_3d_cls = accumulate(g.l_3d_cls, l.cls);
  }

  if (cfg_.kd != KdBaseline::None) {
    const nn::Var& z = trace.taps.at(mc.layers);
    const bool distill = cfg_.kd == KdBaseline::FDDistill || cfg_.kd == KdBaseline::LDDistill;
    const std::size_t row = distill ? mc.distill_row() : 0;
    if (cfg_.kd == KdBaseline::FDClass || cfg_.kd == KdBaseline::FDDistill) {
      if (!s.features) throw DataError("sample '" + sample.clip.id + "' has no skeleton features");
      const Tensor target = sim3d::pool_targets(*s.features, sim3d::AlignmentLevel::Global);
      nn::Var pred = fd_adapter_(nn::gather_rows(z, {row}));
      g.l_kd = nn::squared_error(pred, target, static_cast<double>(target.size()));
    } else {
      if (s.probe_logits.size() != mc.classes)
        throw DataError("sample '" + sample.clip.id + "' has no provider logits for distillation");
      const std::vector<double> p = nn::softmax(s.probe_logits);
      const Tensor target = Tensor::row(p);
      nn::Var student = distill ? distill_head_(nn::gather_rows(z, {row})) : trace.logits;
      g.l_kd = nn::soft_cross_entropy(student, target);
    }
  }

  const LossWeights& w = cfg_.weights;
  g.total = nn::scale(g.l_v_cls, w.cls);
  if (g.l_2d.defined()) g.total = nn::add(g.total, nn::scale(g.l_2d, w.sim2d));
  if (g.l_3d_align.defined()) {
    nn::Var l3 = g.l_3d_cls.defined() ? nn::add(g.l_3d_align, g.l_3d_cls) : g.l_3d_align;
    g.total = nn::add(g.total, nn::scale(l3, w.sim3d));
  }
  if (g.l_kd.defined()) g.total = nn::add(g.total, nn::scale(g.l_kd, w.kd));
  return g;
}

nn::ParamList PiVit::parameters() const {
  nn::ParamList out = backbone_.parameters();
  for (std::size_t i = 0; i < sim2d_.size(); ++i) sim2d_[i].collect(out, "sim2d." + std::to_string(i));
  for (std::size_t i = 0; i < sim3d_.size(); ++i) sim3d_[i].collect(out, "sim3d." + std::to_string(i));
  if (cfg_.kd == KdBaseline::FDClass || cfg_.kd == KdBaseline::FDDistill) fd_adapter_.collect(out, "kd.adapter", true);
  if (cfg_.kd == KdBaseline::LDDistill) distill_head_.collect(out, "kd.distill_head", true);
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig cfg, const sim3d::SkeletonFeatureProvider* provider)
    : cfg_(std::move(cfg)), provider_(provider) {
  cfg_.validate();
  if (cfg_.needs_provider()) {
    if (!provider_) throw ConfigError("config enables 3D-SIM or a KD baseline but no skeleton provider is loaded");
    if (provider_->descriptor().d_s != cfg_.sim3d.d_s)
      throw ConfigError("provider width " + std::to_string(provider_->descriptor().d_s) + " != sim3d.d_s " +
                        std::to_string(cfg_.sim3d.d_s));
  }
  model_ = std::make_unique<PiVit>(cfg_, cfg_.seed);
  reset_optimizer(1);
}

std::vector<PreparedSample> Trainer::prepare(const std::vector<data::LabeledSample>& samples,
                                             std::size_t workers) const {
  std::vector<PreparedSample> out(samples.size());
  const backbone::PatchConfig mc = cfg_.model;
  detail::parallel_for(samples.size(), workers, [&](std::size_t i) {
    const data::LabeledSample& s = samples[i];
    PreparedSample& p = out[i];
    p.sample = &s;
    if (cfg_.uses_2d()) {
      const auto cached = map_cache_.empty() ? std::filesystem::path() : map_cache_ / (s.clip.id + ".map");
      if (!cached.empty() && std::filesystem::exists(cached)) {
        p.map = skelmap::read_map_file(cached);
        if (p.map->temporal != mc.temporal_tokens() || p.map->spatial != mc.spatial_tokens() ||
            p.map->variant != cfg_.sim2d.variant)
          throw DataError("cached map '" + cached.string() + "' does not match the model config");
      } else {
        p.map = build_sample_map(cfg_, s);
      }
    }
    if (cfg_.needs_provider()) {
      if (!s.pose3d) throw DataError("sample '" + s.clip.id + "' has no 3D pose but 3D-SIM/KD is enabled");
      p.features = provider_->produce(*s.pose3d);
      if (cfg_.kd == KdBaseline::LDClass || cfg_.kd == KdBaseline::LDDistill)
        p.probe_logits = provider_->probe_logits(*s.pose3d);
    }
  });
  if (cfg_.needs_provider() && cfg_.noise.feature > 0.0 && !out.empty()) {
    std::vector<sim3d::SkeletonFeatures> clean;
    for (const auto& p : out) clean.push_back(*p.features);
    const auto sigma = sim3d::channel_std(clean);
    for (auto& p : out)
      p.features = sim3d::add_feature_noise(*p.features, cfg_.noise.feature, sigma,
                                            sample_seed(cfg_.seed, p.sample->clip.id, 2));
  }
  return out;
}

skelmap::TokenSkeletonMap build_sample_map(const TrainConfig& cfg, const data::LabeledSample& s) {
  if (!s.pose2d) throw DataError("sample '" + s.clip.id + "' has no 2D pose but 2D-SIM is enabled");
  if (cfg.sim2d.variant == skelmap::MapVariant::Depth && !s.pose3d)
    throw DataError("sample '" + s.clip.id + "' has no 3D pose but the depth map variant needs one");
  const data::Skeleton2DSequence pose =
      cfg.noise.pixel > 0.0 ? skelmap::add_pixel_noise(*s.pose2d, cfg.noise.pixel, sample_seed(cfg.seed, s.clip.id, 1))
                            : *s.pose2d;
  const auto full = skelmap::build_token_map(pose, cfg.model, cfg.map_dilation);
  return skelmap::make_variant(full, cfg.sim2d.variant, cfg.model, &pose, s.pose3d ? &*s.pose3d : nullptr);
}

void Trainer::reset_optimizer(std::size_t total_steps) {
  nn::SgdMomentum::Options o;
  o.lr = cfg_.optim.lr;
  o.momentum = cfg_.optim.momentum;
  o.weight_decay = cfg_.optim.weight_decay;
  o.total_steps = std::max<std::size_t>(total_steps, 1);
  o.warmup_steps = std::min(cfg_.optim.warmup_steps, o.total_steps / 2);
  o.cosine = cfg_.optim.cosine;
  o.grad_clip = cfg_.optim.grad_clip;
  nn::ParamList params = model_->parameters();
  nn::zero_grads(params);
  optimizer_ = std::make_unique<nn::SgdMomentum>(std::move(params), o);
}

LossBundle Trainer::train_step(const std::vector<const PreparedSample*>& batch) {
  if (batch.empty()) throw ContractError("train_step needs a non-empty batch");
  const double w = 1.0 / static_cast<double>(batch.size());
  LossBundle sum;
  for (const PreparedSample* s : batch) {
    PiVit::Graph g = model_->losses(*s);
    nn::scale(g.total, w).backward();
    sum += g.values();
  }
  LossBundle mean = sum.scaled(w);
  if (!mean.all_finite()) throw NumericError("non-finite loss in training step");
  optimizer_->step();
  return mean;
}

LossBundle batch_losses(const PiVit& model, const std::vector<const PreparedSample*>& batch) {
  nn::NoGradGuard guard;
  LossBundle sum;
  for (const PreparedSample* s : batch) sum += model.losses(*s).values();
  return batch.empty() ? sum : sum.scaled(1.0 / static_cast<double>(batch.size()));
}

LossBundle Trainer::evaluate_losses(const std::vector<PreparedSample>& samples) const {
  std::vector<const PreparedSample*> all;
  for (const auto& s : samples) all.push_back(&s);
  return batch_losses(*model_, all);
}

void Trainer::fit(const std::vector<PreparedSample>& train, const std::function<void(const StepRecord&)>& on_step) {
  if (train.empty()) throw DataError("no training samples");
  const std::size_t B = cfg_.optim.batch_size;
  const std::size_t per_epoch = (train.size() + B - 1) / B;
  reset_optimizer(per_epoch * cfg_.optim.epochs);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng(cfg_.seed).fork(0x5EED);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg_.optim.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t b0 = 0; b0 < order.size(); b0 += B) {
      std::vector<const PreparedSample*> batch;
      for (std::size_t i = b0; i < std::min(order.size(), b0 + B); ++i) batch.push_back(&train[order[i]]);
      StepRecord rec;
      rec.step = step++;
      rec.epoch = epoch;
      rec.batch = batch.size();
      rec.lr = optimizer_->learning_rate();
      rec.loss = train_step(batch);
      if (on_step) on_step(rec);
    }
  }
}

// ---------------------------------------------------------------------------
// Stripping and checkpoints

backbone::VideoTransformer strip(const PiVit& model) {
  backbone::VideoTransformer fresh(model.backbone().config(), 0);
  nn::ParamList dst = fresh.parameters();
  nn::copy_values(dst, model.backbone().parameters());
  return fresh;
}

ckpt::Checkpoint training_checkpoint(const PiVit& model) {
  return ckpt::from_params("pivit-train", to_json(model.config()), model.parameters(), true);
}

ckpt::Checkpoint stripped_checkpoint(const backbone::VideoTransformer& backbone) {
  return ckpt::from_params("pivit-backbone", json{{"model", to_json(backbone.config())}}, backbone.parameters(), false);
}

ckpt::Checkpoint strip_checkpoint(const ckpt::Checkpoint& c) {
  if (c.kind == "pivit-backbone") return c;
  if (c.kind != "pivit-train") throw ContractError("cannot strip a checkpoint of kind '" + c.kind + "'");
  ckpt::Checkpoint out;
  out.kind = "pivit-backbone";
  out.config = json{{"model", to_json(train_config_from_json(c.config).effective_model())}};
  for (const auto& e : c.entries)
    if (!e.train_only) out.entries.push_back(e);
  return out;
}

backbone::VideoTransformer load_backbone(const ckpt::Checkpoint& c) {
  backbone::PatchConfig cfg;
  if (c.kind == "pivit-backbone")
    cfg = patch_config_from_json(c.config.at("model"));
  else if (c.kind == "pivit-train")
    cfg = train_config_from_json(c.config).effective_model();
  else
    throw ContractError("checkpoint kind '" + c.kind + "' holds no backbone");
  cfg.validate();
  backbone::VideoTransformer vt(cfg, 0);
  nn::ParamList params = vt.parameters();
  c.apply_to(params);
  return vt;
}

std::unique_ptr<PiVit> load_pivit(const ckpt::Checkpoint& c) {
  if (c.kind != "pivit-train") throw ContractError("checkpoint kind '" + c.kind + "' is not a training checkpoint");
  auto model = std::make_unique<PiVit>(train_config_from_json(c.config), 0);
  nn::ParamList params = model->parameters();
  c.apply_to(params);
  return model;
}

// ---------------------------------------------------------------------------
// Fusion and splits

std::vector<double> late_fuse(const std::vector<double>& rgb_logits, const std::vector<double>& pose_logits,
                              const FusionConfig& fusion) {
  if (rgb_logits.size() != pose_logits.size())
    throw ContractError("late fusion: " + std::to_string(rgb_logits.size()) + " RGB classes vs " +
                        std::to_string(pose_logits.size()) + " pose classes");
  const double wr = fusion.weight_rgb, wp = fusion.weight_pose;
  if (!(wr >= 0.0) || !(wp >= 0.0) || !(wr + wp > 0.0)) throw ConfigError("fusion weights must be >= 0 with a positive sum");
  const auto a = nn::softmax(rgb_logits), b = nn::softmax(pose_logits);
  std::vector<double> out(a.size());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += out[i] = wr * a[i] + wp * b[i];
  for (double& v : out) v /= total;
  return out;
}

std::pair<std::vector<data::LabeledSample>, std::vector<data::LabeledSample>> split_holdout(
    const std::vector<data::LabeledSample>& samples, std::size_t holdout_per_class) {
  std::map<std::size_t, std::size_t> count, seen;
  for (const auto& s : samples) ++count[s.clip.label];
  for (const auto& [label, n] : count)
    if (n <= holdout_per_class)
      throw DataError("class " + std::to_string(label) + " has " + std::to_string(n) + " samples, cannot hold out " +
                      std::to_string(holdout_per_class));
  std::pair<std::vector<data::LabeledSample>, std::vector<data::LabeledSample>> out;
  for (const auto& s : samples) {
    const std::size_t k = seen[s.clip.label]++;
    (k + holdout_per_class >= count[s.clip.label] ? out.second : out.first).push_back(s);
  }
  return out;
}

}  // namespace pivit::trainer
