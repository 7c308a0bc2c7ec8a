#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "pivit/backbone.hpp"
#include "pivit/checkpoint.hpp"
#include "pivit/data.hpp"
#include "pivit/sim2d.hpp"
#include "pivit/sim3d.hpp"
#include "pivit/skelmap.hpp"

namespace pivit::trainer {

enum class KdBaseline { None, FDClass, FDDistill, LDClass, LDDistill };
std::string to_string(KdBaseline k);
KdBaseline parse_kd(const std::string& name);

struct OptimConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t warmup_steps = 10;
  double grad_clip = 5.0;
  bool cosine = true;
};

struct LossWeights {
  double cls = 1.0;
  double sim2d = 1.0;
  double sim3d = 1.0;
  double kd = 1.0;
};

struct NoiseConfig {
  double pixel = 0.0;    // pose-map noise, pixels
  double feature = 0.0;  // skeleton-feature noise, multiples of channel std
};

struct TrainConfig {
  backbone::PatchConfig model;
  std::size_t joints = 5;
  OptimConfig optim;
  std::uint64_t seed = 0;
  /// Tap layers of each module (1-based); empty disables the module.
  std::vector<std::size_t> sim2d_layers{1};
  sim2d::Sim2DConfig sim2d;
  std::vector<std::size_t> sim3d_layers{4};
  sim3d::Sim3DConfig sim3d;
  LossWeights weights;
  /// A KD baseline replaces both induction modules.
  KdBaseline kd = KdBaseline::None;
  NoiseConfig noise;
  std::size_t map_dilation = 0;
  sim3d::ReferenceProviderConfig provider;

  bool uses_2d() const { return kd == KdBaseline::None && !sim2d_layers.empty(); }
  bool uses_3d() const { return kd == KdBaseline::None && !sim3d_layers.empty(); }
  bool needs_provider() const { return uses_3d() || kd != KdBaseline::None; }
  /// Backbone config with the distillation token switched on for the
  /// distill-token baselines.
  backbone::PatchConfig effective_model() const;
  void validate() const;
};

/// Defaults as a config document; placements are written symbolically so
/// they follow model.layers.
nlohmann::json default_config_document();
nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a ConfigError. Layer
/// lists accept integers and the strings "L" and "L/2".
TrainConfig train_config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const backbone::PatchConfig& cfg);
backbone::PatchConfig patch_config_from_json(const nlohmann::json& doc);

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise. The path must already exist in
/// `doc` unless `allow_new` is set.
void apply_override(nlohmann::json& doc, const std::string& assignment, bool allow_new = false);

struct LossBundle {
  double l_v_cls = 0.0;
  double l_2d = 0.0;
  double l_3d_align = 0.0;
  double l_3d_cls = 0.0;
  double l_kd = 0.0;  // KD baselines only
  double total = 0.0;

  /// The weighted sum, evaluated in the same order the graph uses.
  double weighted_sum(const LossWeights& w) const;
  bool all_finite() const;
  LossBundle& operator+=(const LossBundle& o);
  LossBundle scaled(double s) const;
  nlohmann::json to_json() const;
};

/// One training sample with its precomputed auxiliary targets.
struct PreparedSample {
  const data::LabeledSample* sample = nullptr;
  std::optional<skelmap::TokenSkeletonMap> map;
  std::optional<sim3d::SkeletonFeatures> features;
  std::vector<double> probe_logits;
};

/// Backbone plus the train-time modules for one TrainConfig.
class PiVit {
 public:
  PiVit(const TrainConfig& cfg, std::uint64_t seed);

  struct Graph {
    nn::Var l_v_cls, l_2d, l_3d_align, l_3d_cls, l_kd, total;
    LossBundle values() const;
  };
  Graph losses(const PreparedSample& s) const;

  const TrainConfig& config() const { return cfg_; }
  backbone::VideoTransformer& backbone() { return backbone_; }
  const backbone::VideoTransformer& backbone() const { return backbone_; }
  const std::vector<sim2d::Sim2DHead>& sim2d_heads() const { return sim2d_; }
  const std::vector<sim3d::Sim3DHead>& sim3d_heads() const { return sim3d_; }
  nn::Linear& fd_adapter() { return fd_adapter_; }

  /// Backbone parameters followed by every train-only module parameter.
  nn::ParamList parameters() const;

 private:
  TrainConfig cfg_;
  backbone::VideoTransformer backbone_;
  std::vector<sim2d::Sim2DHead> sim2d_;
  std::vector<sim3d::Sim3DHead> sim3d_;
  nn::Linear fd_adapter_;
  nn::Linear distill_head_;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double lr = 0.0;
  LossBundle loss;
  nlohmann::json to_json() const;
};

class Trainer {
 public:
  /// `provider` must outlive the trainer; it is only read.
  explicit Trainer(TrainConfig cfg, const sim3d::SkeletonFeatureProvider* provider = nullptr);

  PiVit& model() { return *model_; }
  const PiVit& model() const { return *model_; }
  const TrainConfig& config() const { return cfg_; }

  /// Map files named "<id>.map" in `dir` replace on-the-fly map building.
  void set_map_cache(std::filesystem::path dir) { map_cache_ = std::move(dir); }

  /// Builds maps and provider targets. Throws DataError naming the sample
  /// when an enabled module lacks its pose stream.
  std::vector<PreparedSample> prepare(const std::vector<data::LabeledSample>& samples, std::size_t workers = 1) const;

  /// Sets the optimizer schedule length and resets momentum.
  void reset_optimizer(std::size_t total_steps);
  /// Mean-over-batch losses, one optimizer step on their sum.
  LossBundle train_step(const std::vector<const PreparedSample*>& batch);
  LossBundle evaluate_losses(const std::vector<PreparedSample>& samples) const;
  /// Full schedule over `train`; `on_step` sees every step.
  void fit(const std::vector<PreparedSample>& train, const std::function<void(const StepRecord&)>& on_step = {});

 private:
  TrainConfig cfg_;
  const sim3d::SkeletonFeatureProvider* provider_;
  std::unique_ptr<PiVit> model_;
  std::unique_ptr<nn::SgdMomentum> optimizer_;
  std::filesystem::path map_cache_;
};

/// The 2D-SIM target of one sample under `cfg` (variant, pixel noise and
/// dilation applied).
skelmap::TokenSkeletonMap build_sample_map(const TrainConfig& cfg, const data::LabeledSample& sample);

/// Same loss values as train_step but without the update.
LossBundle batch_losses(const PiVit& model, const std::vector<const PreparedSample*>& batch);

/// A fresh backbone carrying the trained backbone weights only.
backbone::VideoTransformer strip(const PiVit& model);

/// Checkpoint kinds: "pivit-train" (everything, train-only flagged) and
/// "pivit-backbone" (stripped).
ckpt::Checkpoint training_checkpoint(const PiVit& model);
ckpt::Checkpoint stripped_checkpoint(const backbone::VideoTransformer& backbone);
/// Drops every train-only entry of a training checkpoint.
ckpt::Checkpoint strip_checkpoint(const ckpt::Checkpoint& c);
/// Backbone from either checkpoint kind.
backbone::VideoTransformer load_backbone(const ckpt::Checkpoint& c);
std::unique_ptr<PiVit> load_pivit(const ckpt::Checkpoint& c);

struct FusionConfig {
  double weight_rgb = 0.5;
  double weight_pose = 0.5;
};

/// Weighted average of the two softmax distributions, renormalised.
std::vector<double> late_fuse(const std::vector<double>& rgb_logits, const std::vector<double>& pose_logits,
                              const FusionConfig& fusion = {});

/// Deterministic per-class split of a class-major sample list: the last
/// `holdout_per_class` samples of each class go to the second list.
std::pair<std::vector<data::LabeledSample>, std::vector<data::LabeledSample>> split_holdout(
    const std::vector<data::LabeledSample>& samples, std::size_t holdout_per_class);

}  // namespace pivit::trainer
