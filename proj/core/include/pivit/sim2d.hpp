#pragma once

#include <string>

#include "pivit/backbone.hpp"
#include "pivit/layers.hpp"
#include "pivit/skelmap.hpp"

namespace pivit {

/// Form of the parameterised projection shared by both induction modules.
enum class HeadKind { FC, MLP, Transformer };
std::string to_string(HeadKind k);
HeadKind parse_head_kind(const std::string& name);

enum class Reduction { Mean, Sum };
std::string to_string(Reduction r);
Reduction parse_reduction(const std::string& name);

}  // namespace pivit

namespace pivit::sim2d {

struct Sim2DConfig {
  std::size_t tap_layer = 1;
  std::size_t d_b = 0;  // 0 means d_v
  HeadKind head_kind = HeadKind::FC;
  skelmap::MapVariant variant = skelmap::MapVariant::Full;
  /// Reduction over tokens after the per-token joint mean.
  Reduction reduction = Reduction::Mean;
  double depth_weight = 1.0;
};

/// Token-to-joint predictor: f_2D (d_v -> d_b) followed by the joint
/// classifier (d_b -> J, or 1 for the flat map) and, for the depth map, a
/// depth regressor (d_b -> J).
class Sim2DHead {
 public:
  Sim2DHead(const Sim2DConfig& cfg, std::size_t d_v, std::size_t joints, std::uint64_t seed);

  struct Prediction {
    nn::Var logits;  // (T_v*S_v) x channels
    nn::Var depth;   // (T_v*S_v) x J, depth variant only
  };

  /// `z` is a full token tensor; the class and distillation rows are
  /// dropped before projection.
  Prediction predict(const nn::Var& z, const backbone::PatchConfig& cfg) const;

  const Sim2DConfig& config() const { return cfg_; }
  std::size_t channels() const { return channels_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::Linear& classifier() { return classifier_; }

 private:
  Sim2DConfig cfg_;
  std::size_t d_v_;
  std::size_t channels_;
  nn::Linear fc_;
  nn::DeepMlp mlp_;
  nn::Linear tf_in_;
  std::vector<nn::EncoderLayer> tf_layers_;
  nn::Linear classifier_;
  nn::Linear depth_head_;
};

/// Rows of the patch tokens inside a token tensor for this config.
std::vector<std::size_t> patch_rows(const backbone::PatchConfig& cfg);

/// Convenience wrapper returning plain logits (no gradient).
Tensor predict_token_map(const backbone::TokenTensor& z, const Sim2DHead& head, const backbone::PatchConfig& cfg);

/// Sigmoid BCE, meaned over channels per token then reduced over tokens.
/// Depth maps add the masked squared error of the depth regression.
nn::Var loss_2d(const Sim2DHead::Prediction& pred, const skelmap::TokenSkeletonMap& target,
                Reduction reduction = Reduction::Mean, double depth_weight = 1.0);
nn::Var loss_2d(const nn::Var& logits, const skelmap::TokenSkeletonMap& target, Reduction reduction = Reduction::Mean);

}  // namespace pivit::sim2d
