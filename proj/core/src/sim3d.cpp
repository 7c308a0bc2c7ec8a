#include "pivit/sim3d.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pivit/binio.hpp"
#include "pivit/error.hpp"
#include "pivit/rng.hpp"

namespace pivit::sim3d {

using nlohmann::json;

namespace {

constexpr std::size_t kInputFeatures = 6;
constexpr std::size_t kMlpDepth = 4;
constexpr std::size_t kEncoderLayers = 2;

std::size_t encoder_heads(std::size_t width) {
  for (std::size_t h : {4u, 2u})
    if (width % h == 0) return h;
  return 1;
}

void lock(nn::ParamList params) {
  for (auto& p : params) {
    p.var.node()->requires_grad = false;
    p.var.node()->grad = Tensor();
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Reference provider

ReferenceProvider::ReferenceProvider(const ReferenceProviderConfig& cfg)
    : cfg_(cfg), norm_mean_(kInputFeatures, 0.0), norm_std_(kInputFeatures, 1.0) {
  if (cfg_.d_s == 0 || cfg_.classes == 0 || cfg_.joints == 0) throw ConfigError("provider dims must be positive");
  Rng rng(cfg_.seed);
  // Wider init than the transformer default: the encoder is shallow and
  // trained from scratch.
  embed_ = nn::Linear(kInputFeatures, cfg_.d_s, rng);
  embed_.weight.mutable_value() = nn::truncated_normal({kInputFeatures, cfg_.d_s}, 0.5, rng);
  for (std::size_t k = 0; k < cfg_.temporal_layers; ++k) {
    nn::Linear l(3 * cfg_.d_s, cfg_.d_s, rng);
    l.weight.mutable_value() = nn::truncated_normal({3 * cfg_.d_s, cfg_.d_s}, 1.0 / std::sqrt(3.0 * cfg_.d_s), rng);
    temporal_.push_back(std::move(l));
  }
  probe_ = nn::Linear(cfg_.d_s, cfg_.classes, rng);
}

Tensor ReferenceProvider::input_features(const data::Skeleton3DSequence& pose) const {
  if (pose.joints != cfg_.joints)
    throw ContractError("provider expects " + std::to_string(cfg_.joints) + " joints, pose has " +
                        std::to_string(pose.joints));
  const std::size_t T = pose.frames, J = pose.joints;
  std::vector<double> pos(T * J * 3, 0.0);  // missing joints stay zero
  for (const auto& e : pose.entries) {
    double* p = pos.data() + (e.t * J + e.j) * 3;
    p[0] = e.x;
    p[1] = e.y;
    p[2] = e.z;
  }
  Tensor x = Tensor::matrix(T * J, kInputFeatures);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t prev = t > 0 ? t - 1 : t, next = t > 0 ? t : std::min(t + 1, T - 1);
      for (std::size_t c = 0; c < 3; ++c) {
        x(t * J + j, c) = pos[(t * J + j) * 3 + c];
        x(t * J + j, 3 + c) = pos[(next * J + j) * 3 + c] - pos[(prev * J + j) * 3 + c];
      }
      for (std::size_t c = 0; c < kInputFeatures; ++c)
        x(t * J + j, c) = (x(t * J + j, c) - norm_mean_[c]) / norm_std_[c];
    }
  return x;
}

ReferenceProvider::Graph ReferenceProvider::forward(const data::Skeleton3DSequence& pose) const {
  const std::size_t T = pose.frames, J = pose.joints;
  nn::Var h = nn::gelu(embed_(nn::Var::constant(input_features(pose))));
  std::vector<std::size_t> prev(T * J), next(T * J);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < J; ++j) {
      prev[t * J + j] = t > 0 ? (t - 1) * J + j : nn::kZeroRow;
      next[t * J + j] = t + 1 < T ? (t + 1) * J + j : nn::kZeroRow;
    }
  for (const auto& layer : temporal_) {
    nn::Var window = nn::concat_cols({nn::gather_rows(h, prev), h, nn::gather_rows(h, next)});
    h = nn::add(h, nn::gelu(layer(window)));
  }
  return {h, probe_(nn::mean_rows(h))};
}

SkeletonFeatures ReferenceProvider::produce(const data::Skeleton3DSequence& pose) const {
  nn::NoGradGuard guard;
  Graph g = forward(pose);
  return {g.features.value().reshaped({pose.frames, pose.joints, cfg_.d_s})};
}

std::vector<double> ReferenceProvider::probe_logits(const data::Skeleton3DSequence& pose) const {
  nn::NoGradGuard guard;
  return forward(pose).logits.value().storage();
}

ProviderDescriptor ReferenceProvider::descriptor() const { return {"reference", cfg_.d_s, "native"}; }

nn::ParamList ReferenceProvider::parameters() const {
  nn::ParamList out;
  embed_.collect(out, "provider.embed", false);
  for (std::size_t k = 0; k < temporal_.size(); ++k) temporal_[k].collect(out, "provider.temporal." + std::to_string(k), false);
  probe_.collect(out, "provider.probe", false);
  return out;
}

std::uint64_t ReferenceProvider::weight_hash() const {
  std::uint64_t h = ckpt::weight_hash(parameters());
  h = binio::fnv1a(norm_mean_.data(), norm_mean_.size() * sizeof(double), h);
  return binio::fnv1a(norm_std_.data(), norm_std_.size() * sizeof(double), h);
}

void ReferenceProvider::fit_normalisation(const std::vector<data::LabeledSample>& train) {
  std::fill(norm_mean_.begin(), norm_mean_.end(), 0.0);
  std::fill(norm_std_.begin(), norm_std_.end(), 1.0);
  std::vector<double> sum(kInputFeatures, 0.0), sq(kInputFeatures, 0.0);
  std::size_t n = 0;
  for (const auto& s : train) {
    if (!s.pose3d) continue;
    Tensor x = input_features(*s.pose3d);
    for (std::size_t r = 0; r < x.rows(); ++r, ++n)
      for (std::size_t c = 0; c < kInputFeatures; ++c) {
        sum[c] += x(r, c);
        sq[c] += x(r, c) * x(r, c);
      }
  }
  if (n == 0) throw DataError("provider pretraining needs samples with 3D poses");
  for (std::size_t c = 0; c < kInputFeatures; ++c) {
    norm_mean_[c] = sum[c] / static_cast<double>(n);
    const double var = sq[c] / static_cast<double>(n) - norm_mean_[c] * norm_mean_[c];
    norm_std_[c] = std::sqrt(std::max(var, 0.0)) + 1e-6;
  }
}

std::unique_ptr<ReferenceProvider> ReferenceProvider::pretrain(const std::vector<data::LabeledSample>& train,
                                                               const std::vector<data::LabeledSample>& holdout,
                                                               const ReferenceProviderConfig& cfg,
                                                               PretrainReport* report) {
  auto provider = std::make_unique<ReferenceProvider>(cfg);
  provider->fit_normalisation(train);

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (train[i].pose3d) order.push_back(i);
  const std::size_t batch = std::max<std::size_t>(cfg.batch_size, 1);
  const std::size_t steps_per_epoch = (order.size() + batch - 1) / batch;

  nn::SgdMomentum::Options opt;
  opt.lr = cfg.lr;
  opt.momentum = cfg.momentum;
  opt.total_steps = steps_per_epoch * cfg.epochs;
  opt.weight_decay = 1e-4;
  nn::ParamList params = provider->parameters();
  nn::SgdMomentum optimizer(params, opt);
  nn::zero_grads(params);

  Rng rng = Rng(cfg.seed).fork(0xB0);
  PretrainReport local;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t b1 = std::min(order.size(), b0 + batch);
      const double w = 1.0 / static_cast<double>(b1 - b0);
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& s = train[order[i]];
        nn::Var loss = nn::scale(nn::cross_entropy(provider->forward(*s.pose3d).logits, s.clip.label), w);
        loss.backward();
        epoch_loss += loss.value()[0] * w * static_cast<double>(b1 - b0) / static_cast<double>(order.size());
      }
      optimizer.step();
    }
    local.epoch_loss.push_back(epoch_loss);
  }
  lock(provider->parameters());
  local.train_accuracy = provider->accuracy(train);
  local.holdout_accuracy = holdout.empty() ? 0.0 : provider->accuracy(holdout);
  if (report) *report = local;
  return provider;
}

double ReferenceProvider::accuracy(const std::vector<data::LabeledSample>& samples) const {
  std::size_t correct = 0, total = 0;
  for (const auto& s : samples) {
    if (!s.pose3d) continue;
    const auto logits = probe_logits(*s.pose3d);
    const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    correct += pred == s.clip.label;
    ++total;
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

ckpt::Checkpoint ReferenceProvider::to_checkpoint() const {
  json cfg = {{"d_s", cfg_.d_s},         {"classes", cfg_.classes},       {"joints", cfg_.joints},
              {"temporal_layers", cfg_.temporal_layers}, {"seed", cfg_.seed}, {"norm_mean", norm_mean_},
              {"norm_std", norm_std_}};
  return ckpt::from_params("reference-provider", cfg, parameters());
}

std::unique_ptr<ReferenceProvider> ReferenceProvider::from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.kind != "reference-provider") throw ParseError("checkpoint is not a reference provider (kind '" + c.kind + "')");
  ReferenceProviderConfig cfg;
  cfg.d_s = c.config.at("d_s").get<std::size_t>();
  cfg.classes = c.config.at("classes").get<std::size_t>();
  cfg.joints = c.config.at("joints").get<std::size_t>();
  cfg.temporal_layers = c.config.at("temporal_layers").get<std::size_t>();
  cfg.seed = c.config.value("seed", std::uint64_t{0});
  auto p = std::make_unique<ReferenceProvider>(cfg);
  p->norm_mean_ = c.config.at("norm_mean").get<std::vector<double>>();
  p->norm_std_ = c.config.at("norm_std").get<std::vector<double>>();
  if (p->norm_mean_.size() != kInputFeatures || p->norm_std_.size() != kInputFeatures)
    throw ParseError("provider normalisation record has the wrong size");
  nn::ParamList params = p->parameters();
  c.apply_to(params);
  lock(params);
  return p;
}

// ---------------------------------------------------------------------------
// Pooling and temporal reconciliation

std::string to_string(AlignmentLevel l) {
  switch (l) {
    case AlignmentLevel::Global:
      return "global";
    case AlignmentLevel::Local:
      return "local";
    case AlignmentLevel::GlobalLocal:
      return "global+local";
  }
  return "global";
}

AlignmentLevel parse_level(const std::string& name) {
  if (name == "global") return AlignmentLevel::Global;
  if (name == "local") return AlignmentLevel::Local;
  if (name == "global+local" || name == "global_local") return AlignmentLevel::GlobalLocal;
  throw ConfigError("unknown alignment level '" + name + "' (expected global|local|global+local)");
}

Tensor pool_targets(const SkeletonFeatures& y, AlignmentLevel level) {
  const std::size_t T = y.frames(), J = y.joints(), D = y.width();
  if (level == AlignmentLevel::Local) {
    Tensor out = Tensor::matrix(T, D);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t c = 0; c < D; ++c) out(t, c) += y.at(t, j, c) / static_cast<double>(J);
    return out;
  }
  if (level != AlignmentLevel::Global) throw ContractError("pool_targets takes a single level");
  Tensor out = Tensor::matrix(1, D);
  const double w = 1.0 / static_cast<double>(T * J);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t c = 0; c < D; ++c) out(0, c) += w * y.at(t, j, c);
  return out;
}

nn::Var pool_visual(const nn::Var& z, const backbone::PatchConfig& cfg, AlignmentLevel level) {
  if (z.value().rows() != cfg.token_rows()) throw ContractError("pool_visual: token tensor does not match config");
  const std::size_t S = cfg.spatial_tokens();
  if (level == AlignmentLevel::Global) return nn::segment_mean_rows(z, {sim2d::patch_rows(cfg)});
  if (level != AlignmentLevel::Local) throw ContractError("pool_visual takes a single level");
  nn::RowGroups frames(cfg.temporal_tokens());
  for (std::size_t tv = 0; tv < frames.size(); ++tv)
    for (std::size_t s = 0; s < S; ++s) frames[tv].push_back(cfg.token_row(tv, s));
  return nn::segment_mean_rows(z, frames);
}

Tensor pool_visual(const backbone::TokenTensor& z, const backbone::PatchConfig& cfg, AlignmentLevel level) {
  nn::NoGradGuard guard;
  return pool_visual(nn::Var::constant(z.tokens), cfg, level).value();
}

std::vector<std::size_t> reconcile_indices(std::size_t t_s, std::size_t t_v) {
  if (t_s == 0 || t_v == 0) throw ContractError("reconcile_time needs T_s, T_v >= 1");
  std::vector<std::size_t> idx(t_v);
  for (std::size_t i = 0; i < t_v; ++i) idx[i] = t_s > t_v ? i * t_s / t_v : std::min(i, t_s - 1);
  return idx;
}

Tensor reconcile_time(const Tensor& y_local, std::size_t t_v) {
  const auto idx = reconcile_indices(y_local.rows(), t_v);
  const std::size_t D = y_local.cols();
  Tensor out = Tensor::matrix(t_v, D);
  for (std::size_t i = 0; i < t_v; ++i) std::copy_n(y_local.data() + idx[i] * D, D, out.data() + i * D);
  return out;
}

// ---------------------------------------------------------------------------
// Projection head and losses

nn::Var Sim3DHead::Projector::operator()(const nn::Var& x) const {
  switch (kind) {
    case HeadKind::FC:
      return fc(x);
    case HeadKind::MLP:
      return mlp(x);
    case HeadKind::Transformer: {
      nn::Var h = x;
      for (const auto& layer : encoder) h = layer(h);
      return out(h);
    }
  }
  return fc(x);
}

void Sim3DHead::Projector::collect(nn::ParamList& params, const std::string& prefix) const {
  switch (kind) {
    case HeadKind::FC:
      fc.collect(params, prefix, true);
      break;
    case HeadKind::MLP:
      mlp.collect(params, prefix, true);
      break;
    case HeadKind::Transformer:
      for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect(params, prefix + ".layers." + std::to_string(i), true);
      out.collect(params, prefix + ".out", true);
      break;
  }
}

Sim3DHead::Projector Sim3DHead::make_projector(HeadKind kind, std::size_t d_v, std::size_t d_s, Rng& rng) {
  Projector p;
  p.kind = kind;
  switch (kind) {
    case HeadKind::FC:
      p.fc = nn::Linear(d_v, d_s, rng);
      break;
    case HeadKind::MLP:
      p.mlp = nn::DeepMlp(d_v, d_v, d_s, kMlpDepth, rng);
      break;
    case HeadKind::Transformer:
      for (std::size_t i = 0; i < kEncoderLayers; ++i) p.encoder.emplace_back(d_v, encoder_heads(d_v), rng);
      p.out = nn::Linear(d_v, d_s, rng);
      break;
  }
  return p;
}

Sim3DHead::Sim3DHead(const Sim3DConfig& cfg, std::size_t d_v, std::size_t classes, std::uint64_t seed)
    : cfg_(cfg), d_v_(d_v) {
  if (cfg_.d_s == 0) throw ConfigError("3D-SIM d_s must be positive");
  Rng rng(seed);
  if (cfg_.alignment != AlignmentLevel::Local) global_ = make_projector(cfg_.head_kind, d_v, cfg_.d_s, rng);
  if (cfg_.alignment != AlignmentLevel::Global) local_ = make_projector(cfg_.head_kind, d_v, cfg_.d_s, rng);
  if (cfg_.with_classifier) classifier_ = nn::Linear(cfg_.d_s, classes, rng);
}

nn::Var Sim3DHead::project(const nn::Var& pooled, AlignmentLevel level) const {
  if (pooled.value().cols() != d_v_)
    throw ContractError("f_3D expects width " + std::to_string(d_v_) + ", got " + std::to_string(pooled.value().cols()));
  if (level == AlignmentLevel::Global && cfg_.alignment != AlignmentLevel::Local) return global_(pooled);
  if (level == AlignmentLevel::Local && cfg_.alignment != AlignmentLevel::Global) return local_(pooled);
  throw ContractError("f_3D has no projector for level " + to_string(level));
}

nn::Var Sim3DHead::classify(const nn::Var& prediction) const {
  if (!cfg_.with_classifier) throw ContractError("3D-SIM classifier disabled");
  return classifier_(prediction.value().rows() > 1 ? nn::mean_rows(prediction) : prediction);
}

Sim3DHead::Losses Sim3DHead::losses(const nn::Var& z, const backbone::PatchConfig& cfg,
                                    const SkeletonFeatures& features, std::size_t label) const {
  if (features.width() != cfg_.d_s)
    throw ContractError("skeleton features have width " + std::to_string(features.width()) + ", 3D-SIM expects " +
                        std::to_string(cfg_.d_s));
  nn::Var align, cls_input;
  if (cfg_.alignment != AlignmentLevel::Local) {
    nn::Var pred = project(pool_visual(z, cfg, AlignmentLevel::Global), AlignmentLevel::Global);
    align = loss_align(pool_targets(features, AlignmentLevel::Global), pred, cfg_.mse_inner);
    cls_input = pred;
  }
  if (cfg_.alignment != AlignmentLevel::Global) {
    nn::Var pred = project(pool_visual(z, cfg, AlignmentLevel::Local), AlignmentLevel::Local);
    const Tensor target = reconcile_time(pool_targets(features, AlignmentLevel::Local), cfg.temporal_tokens());
    nn::Var local = loss_align(target, pred, cfg_.mse_inner);
    align = align.defined() ? nn::add(align, local) : local;
    if (!cls_input.defined()) cls_input = pred;
  }
  Losses out{align, {}, align};
  if (cfg_.with_classifier) {
    out.cls = nn::cross_entropy(classify(cls_input), label);
    out.total = nn::add(align, out.cls);
  }
  return out;
}

void Sim3DHead::collect(nn::ParamList& out, const std::string& prefix) const {
  if (cfg_.alignment != AlignmentLevel::Local) global_.collect(out, prefix + ".f3d_global");
  if (cfg_.alignment != AlignmentLevel::Global) local_.collect(out, prefix + ".f3d_local");
  if (cfg_.with_classifier) classifier_.collect(out, prefix + ".classifier", true);
}

nn::Var loss_align(const Tensor& target, const nn::Var& pred, Reduction inner) {
  const Tensor& p = pred.value();
  if (p.rows() != target.rows() || p.cols() != target.cols())
    throw ContractError("loss_align: prediction " + shape_string(p.shape()) + " vs target " +
                        shape_string(target.shape()));
  double divisor = static_cast<double>(p.rows());
  if (inner == Reduction::Mean) divisor *= static_cast<double>(p.cols());
  return nn::squared_error(pred, target, divisor);
}

double loss_align(const Tensor& target, const Tensor& pred, Reduction inner) {
  nn::NoGradGuard guard;
  return loss_align(target, nn::Var::constant(pred), inner).value()[0];
}

Sim3DHead::Losses loss_3d(const Tensor& target, const nn::Var& pred, std::size_t label, const nn::Linear& cls_head,
                          bool with_classifier, Reduction inner) {
  nn::Var align = loss_align(target, pred, inner);
  if (!with_classifier) return {align, {}, align};
  nn::Var pooled = pred.value().rows() > 1 ? nn::mean_rows(pred) : pred;
  nn::Var cls = nn::cross_entropy(cls_head(pooled), label);
  return {align, cls, nn::add(align, cls)};
}

// ---------------------------------------------------------------------------
// Feature noise and cache

std::vector<double> channel_std(const std::vector<SkeletonFeatures>& features) {
  if (features.empty()) throw ContractError("channel_std: no features");
  const std::size_t D = features.front().width();
  std::vector<double> sum(D, 0.0), sq(D, 0.0);
  std::size_t n = 0;
  for (const auto& f : features) {
    if (f.width() != D) throw ContractError("channel_std: width mismatch");
    for (std::size_t r = 0; r < f.frames() * f.joints(); ++r, ++n)
      for (std::size_t c = 0; c < D; ++c) {
        const double v = f.y[r * D + c];
        sum[c] += v;
        sq[c] += v * v;
      }
  }
  std::vector<double> out(D);
  for (std::size_t c = 0; c < D; ++c) {
    const double mean = sum[c] / static_cast<double>(n);
    out[c] = std::sqrt(std::max(0.0, sq[c] / static_cast<double>(n) - mean * mean));
  }
  return out;
}

SkeletonFeatures add_feature_noise(const SkeletonFeatures& y, double level, const std::vector<double>& sigma,
                                   std::uint64_t seed) {
  if (!(level >= 0.0)) throw ConfigError("feature noise level must be >= 0");
  if (level == 0.0) return y;
  if (sigma.size() != y.width()) throw ContractError("feature noise: sigma width mismatch");
  Rng rng(seed);
  SkeletonFeatures out = y;
  const std::size_t D = y.width();
  for (std::size_t i = 0; i < out.y.size(); ++i) {
    const double hi = level * sigma[i % D];
    if (hi > 0.0) out.y[i] += rng.uniform(0.0, hi);
  }
  return out;
}

namespace {
constexpr char kFeatMagic[9] = "PVFEAT01";
}

void write_feature_cache(const std::filesystem::path& path, const SkeletonFeatures& y, const ProviderDescriptor& d,
                         std::uint64_t weight_hash) {
  auto out = binio::open_out(path);
  binio::put_magic(out, kFeatMagic);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(y.frames()));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(y.joints()));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(y.width()));
  binio::put_string(out, d.name);
  binio::put<std::uint64_t>(out, weight_hash);
  std::vector<float> payload(y.y.size());
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(y.y[i]);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw Error("failed writing feature cache '" + path.string() + "'");
}

SkeletonFeatures read_feature_cache(const std::filesystem::path& path, FeatureCacheHeader* header) {
  auto in = binio::open_in(path);
  binio::expect_magic(in, kFeatMagic, "feature cache");
  FeatureCacheHeader h;
  h.frames = binio::get<std::uint32_t>(in);
  h.joints = binio::get<std::uint32_t>(in);
  h.width = binio::get<std::uint32_t>(in);
  h.provider = binio::get_string(in);
  h.weight_hash = binio::get<std::uint64_t>(in);
  std::vector<float> payload(h.frames * h.joints * h.width);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!in) throw ParseError("feature cache payload truncated");
  SkeletonFeatures f{Tensor({h.frames, h.joints, h.width})};
  for (std::size_t i = 0; i < payload.size(); ++i) f.y[i] = payload[i];
  if (header) *header = h;
  return f;
}

}  // namespace pivit::sim3d
