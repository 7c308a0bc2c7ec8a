#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "pivit/data.hpp"
#include "pivit/layers.hpp"

namespace pivit::backbone {

enum class AttentionKind { Divided, Joint };

/// Input geometry and transformer hyper-parameters. Patches are tau x p x p;
/// partial edge patches are zero padded.
struct PatchConfig {
  std::size_t frames = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t tau = 1;
  std::size_t patch = 8;
  std::size_t d_v = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t classes = 4;
  std::size_t mlp_ratio = 4;
  AttentionKind attention = AttentionKind::Divided;
  /// LayerNorm on the class token before the classification head.
  bool final_norm = false;
  /// Adds one learned token after the patch tokens (distillation baselines).
  bool distill_token = false;

  std::size_t temporal_tokens() const { return (frames + tau - 1) / tau; }
  std::size_t patch_rows() const { return (height + patch - 1) / patch; }
  std::size_t patch_cols() const { return (width + patch - 1) / patch; }
  std::size_t spatial_tokens() const { return patch_rows() * patch_cols(); }
  std::size_t patch_tokens() const { return temporal_tokens() * spatial_tokens(); }
  /// Class token + patch tokens (+ distillation token).
  std::size_t token_rows() const { return 1 + patch_tokens() + (distill_token ? 1 : 0); }
  std::size_t patch_dim() const { return tau * patch * patch * data::VideoClip::kChannels; }
  /// Row of token (t', s) in a token tensor.
  std::size_t token_row(std::size_t tv, std::size_t s) const { return 1 + tv * spatial_tokens() + s; }
  std::size_t distill_row() const { return 1 + patch_tokens(); }

  void validate() const;
  friend bool operator==(const PatchConfig&, const PatchConfig&) = default;
};

/// Token matrix z_l: row 0 is the class token, then T_v*S_v patch tokens in
/// time-major, row-major spatial order.
struct TokenTensor {
  Tensor tokens;
  std::size_t layer = 0;
};

struct BackboneOutput {
  std::vector<double> logits;
  std::map<std::size_t, TokenTensor> taps;
};

/// Raw patch matrix (T_v*S_v x tau*p*p*3) in token order; each row lists
/// (dt, dy, dx, channel) with zeros beyond the clip edge.
Tensor patchify(const data::VideoClip& clip, const PatchConfig& cfg);

struct Block {
  nn::LayerNorm norm1;
  nn::GroupAttention time_attn;  // divided attention only
  nn::GroupAttention space_attn;
  nn::LayerNorm norm2;
  nn::FeedForward mlp;
};

class VideoTransformer {
 public:
  VideoTransformer(PatchConfig cfg, std::uint64_t seed);

  const PatchConfig& config() const { return cfg_; }

  struct Trace {
    nn::Var logits;
    std::map<std::size_t, nn::Var> taps;  // layer (1-based) -> z_l
  };

  /// Differentiable forward pass. `taps` holds 1-based layer indices.
  Trace run(const data::VideoClip& clip, const std::set<std::size_t>& taps,
            std::vector<std::vector<Tensor>>* attention = nullptr) const;

  /// z_0: projected patches + positional embedding, class token prepended.
  nn::Var embed(const data::VideoClip& clip) const;
  TokenTensor tokenize(const data::VideoClip& clip) const;

  /// Gradient-free forward returning plain tensors.
  BackboneOutput forward_with_taps(const data::VideoClip& clip, const std::set<std::size_t>& taps) const;
  std::vector<double> logits(const data::VideoClip& clip) const;

  /// Softmax matrices of every attention call, per layer (inspection only).
  std::vector<std::vector<Tensor>> attention_maps(const data::VideoClip& clip) const;

  nn::ParamList parameters() const;
  std::size_t parameter_count() const { return nn::parameter_count(parameters()); }
  /// Multiply-accumulate count of one forward pass (matmuls and attention
  /// products only).
  std::uint64_t macs() const;

  nn::Linear& head() { return head_; }
  const nn::Linear& head() const { return head_; }

  const nn::RowGroups& time_groups() const { return time_groups_; }
  const nn::RowGroups& space_groups() const { return space_groups_; }

 private:
  nn::Var block_forward(const Block& b, const nn::Var& z, std::vector<Tensor>* capture) const;

  PatchConfig cfg_;
  nn::Linear patch_embed_;
  nn::Var cls_token_;
  nn::Var distill_token_;
  nn::Var pos_embed_;
  std::vector<Block> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;
  nn::RowGroups time_groups_;
  nn::RowGroups space_groups_;
};

/// -log softmax(logits)[label], as a graph node.
nn::Var loss_cls(const nn::Var& logits, std::size_t label);
double loss_cls(const std::vector<double>& logits, std::size_t label);

}  // namespace pivit::backbone
