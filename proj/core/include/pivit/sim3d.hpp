#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "pivit/backbone.hpp"
#include "pivit/checkpoint.hpp"
#include "pivit/data.hpp"
#include "pivit/layers.hpp"
#include "pivit/sim2d.hpp"

namespace pivit::sim3d {

/// Frozen skeleton-model output, T_s x J x d_s.
struct SkeletonFeatures {
  Tensor y;

  std::size_t frames() const { return y.dim(0); }
  std::size_t joints() const { return y.dim(1); }
  std::size_t width() const { return y.dim(2); }
  double at(std::size_t t, std::size_t j, std::size_t c) const { return y[(t * joints() + j) * width() + c]; }
};

struct ProviderDescriptor {
  std::string name;
  std::size_t d_s = 0;
  std::string temporal_policy;  // "native": T_s equals the pose frame count
};

/// A pretrained skeleton model G. Implementations must be pure functions of
/// their (locked) weights: equal inputs give bit-identical outputs.
class SkeletonFeatureProvider {
 public:
  virtual ~SkeletonFeatureProvider() = default;
  virtual SkeletonFeatures produce(const data::Skeleton3DSequence& pose) const = 0;
  /// Class logits of the provider's own probe head.
  virtual std::vector<double> probe_logits(const data::Skeleton3DSequence& pose) const = 0;
  virtual ProviderDescriptor descriptor() const = 0;
  virtual std::uint64_t weight_hash() const = 0;
};

struct ReferenceProviderConfig {
  std::size_t d_s = 32;
  std::size_t classes = 4;
  std::size_t joints = 5;
  std::size_t temporal_layers = 2;
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  double train_accuracy = 0.0;
  double holdout_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Small per-joint temporal encoder standing in for a full skeleton action
/// model. Per (t, j) it embeds normalised position and velocity, then mixes
/// each joint's neighbouring frames with residual kernel-3 temporal layers.
/// The (T, J) axes are preserved; a mean-pooled linear probe classifies.
class ReferenceProvider final : public SkeletonFeatureProvider {
 public:
  explicit ReferenceProvider(const ReferenceProviderConfig& cfg);

  /// Fits the encoder and probe on the skeleton stream of `train`, reports
  /// probe accuracy on `holdout`, then returns the weight-locked provider.
  static std::unique_ptr<ReferenceProvider> pretrain(const std::vector<data::LabeledSample>& train,
                                                     const std::vector<data::LabeledSample>& holdout,
                                                     const ReferenceProviderConfig& cfg,
                                                     PretrainReport* report = nullptr);

  SkeletonFeatures produce(const data::Skeleton3DSequence& pose) const override;
  std::vector<double> probe_logits(const data::Skeleton3DSequence& pose) const override;
  ProviderDescriptor descriptor() const override;
  std::uint64_t weight_hash() const override;

  double accuracy(const std::vector<data::LabeledSample>& samples) const;
  const ReferenceProviderConfig& config() const { return cfg_; }

  ckpt::Checkpoint to_checkpoint() const;
  static std::unique_ptr<ReferenceProvider> from_checkpoint(const ckpt::Checkpoint& c);
  void save(const std::filesystem::path& path) const { ckpt::save(path, to_checkpoint()); }
  static std::unique_ptr<ReferenceProvider> load(const std::filesystem::path& path) {
    return from_checkpoint(ckpt::load(path));
  }

 private:
  struct Graph {
    nn::Var features;  // (T*J) x d_s
    nn::Var logits;
  };
  Graph forward(const data::Skeleton3DSequence& pose) const;
  Tensor input_features(const data::Skeleton3DSequence& pose) const;
  nn::ParamList parameters() const;
  void fit_normalisation(const std::vector<data::LabeledSample>& train);

  ReferenceProviderConfig cfg_;
  std::vector<double> norm_mean_;  // 6 input features
  std::vector<double> norm_std_;
  nn::Linear embed_;
  std::vector<nn::Linear> temporal_;
  nn::Linear probe_;
};

enum class AlignmentLevel { Global, Local, GlobalLocal };
std::string to_string(AlignmentLevel l);
AlignmentLevel parse_level(const std::string& name);

struct Sim3DConfig {
  std::size_t tap_layer = 4;
  AlignmentLevel alignment = AlignmentLevel::Global;
  bool with_classifier = true;
  std::size_t d_s = 32;
  HeadKind head_kind = HeadKind::FC;
  Reduction mse_inner = Reduction::Mean;
  std::string provider = "reference";
};

/// Global: mean over (t, j) -> 1 x d_s. Local: mean over j -> T_s x d_s.
Tensor pool_targets(const SkeletonFeatures& y, AlignmentLevel level);
/// Class and distillation tokens excluded. Global: 1 x d_v, Local: T_v x d_v.
nn::Var pool_visual(const nn::Var& z, const backbone::PatchConfig& cfg, AlignmentLevel level);
Tensor pool_visual(const backbone::TokenTensor& z, const backbone::PatchConfig& cfg, AlignmentLevel level);

/// Row indices taken from a T_s-row local target to get T_v rows:
/// floor(i * T_s / T_v) when T_s > T_v, repeat the last row when T_s < T_v.
std::vector<std::size_t> reconcile_indices(std::size_t t_s, std::size_t t_v);
Tensor reconcile_time(const Tensor& y_local, std::size_t t_v);

/// f_3D projection (d_v -> d_s) plus the auxiliary action classifier.
class Sim3DHead {
 public:
  Sim3DHead(const Sim3DConfig& cfg, std::size_t d_v, std::size_t classes, std::uint64_t seed);

  struct Losses {
    nn::Var align;
    nn::Var cls;    // undefined when the classifier is off
    nn::Var total;  // align (+ cls)
  };

  /// f_3D for one alignment level (Global or Local) on pooled tokens.
  nn::Var project(const nn::Var& pooled, AlignmentLevel level) const;
  nn::Var classify(const nn::Var& prediction) const;

  /// Full module: pool the tapped tokens, project, align against `features`
  /// and classify.
  Losses losses(const nn::Var& z, const backbone::PatchConfig& cfg, const SkeletonFeatures& features,
                std::size_t label) const;

  const Sim3DConfig& config() const { return cfg_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;
  nn::Linear& global_fc() { return global_.fc; }

 private:
  struct Projector {
    HeadKind kind = HeadKind::FC;
    nn::Linear fc;
    nn::DeepMlp mlp;
    std::vector<nn::EncoderLayer> encoder;
    nn::Linear out;

    nn::Var operator()(const nn::Var& x) const;
    void collect(nn::ParamList& out, const std::string& prefix) const;
  };
  static Projector make_projector(HeadKind kind, std::size_t d_v, std::size_t d_s, Rng& rng);

  Sim3DConfig cfg_;
  std::size_t d_v_;
  Projector global_;
  Projector local_;
  nn::Linear classifier_;
};

/// Mean squared difference with the 1/lambda slot average: lambda = 1 for a
/// single global row, lambda = rows for local. `inner` reduces over d_s.
nn::Var loss_align(const Tensor& target, const nn::Var& pred, Reduction inner = Reduction::Mean);
double loss_align(const Tensor& target, const Tensor& pred, Reduction inner = Reduction::Mean);

/// L_3D = L_align + L_cls (classifier on) or L_align. Local predictions are
/// averaged over time before the classifier.
Sim3DHead::Losses loss_3d(const Tensor& target, const nn::Var& pred, std::size_t label, const nn::Linear& cls_head,
                          bool with_classifier, Reduction inner = Reduction::Mean);

/// Per-channel population standard deviation over a feature collection.
std::vector<double> channel_std(const std::vector<SkeletonFeatures>& features);
/// Adds U[0, level * sigma_c] to every element of channel c.
SkeletonFeatures add_feature_noise(const SkeletonFeatures& y, double level, const std::vector<double>& sigma,
                                   std::uint64_t seed);

// Feature cache file: 8-byte magic, u32 T_s, J, d_s, provider name, u64
// provider weight hash, f32 payload.
struct FeatureCacheHeader {
  std::size_t frames = 0, joints = 0, width = 0;
  std::string provider;
  std::uint64_t weight_hash = 0;
};
void write_feature_cache(const std::filesystem::path& path, const SkeletonFeatures& y, const ProviderDescriptor& d,
                         std::uint64_t weight_hash);
SkeletonFeatures read_feature_cache(const std::filesystem::path& path, FeatureCacheHeader* header = nullptr);

inline constexpr const char* kFeatureCacheTag = "pivit-features/1";

}  // namespace pivit::sim3d
