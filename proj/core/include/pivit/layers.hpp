#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pivit/autograd.hpp"
#include "pivit/ops.hpp"
#include "pivit/rng.hpp"

namespace pivit::nn {

struct NamedParam {
  std::string name;
  Var var;
  bool train_only = false;
};
using ParamList = std::vector<NamedParam>;

std::size_t parameter_count(const ParamList& params);
void zero_grads(ParamList& params);
/// Copies values from `src` into same-named entries of `dst`; every entry of
/// `dst` must be present in `src` with the same shape.
void copy_values(ParamList& dst, const ParamList& src);

Tensor truncated_normal(Shape shape, double stddev, Rng& rng);

/// Default init for projection weights.
inline constexpr double kInitStd = 0.02;

/// y = x W + b with W stored in x out.
struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  Var operator()(const Var& x) const { return add_bias(matmul(x, weight), bias); }
  std::size_t in() const { return weight.value().dim(0); }
  std::size_t out() const { return weight.value().dim(1); }
  std::uint64_t macs(std::size_t rows) const { return static_cast<std::uint64_t>(rows) * in() * out(); }
  void collect(ParamList& out, const std::string& prefix, bool train_only) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix, bool train_only) const;
};

/// Two-layer GELU feed-forward block.
struct FeedForward {
  Linear fc1;
  Linear fc2;

  FeedForward() = default;
  FeedForward(std::size_t width, std::size_t hidden, Rng& rng);

  Var operator()(const Var& x) const { return fc2(gelu(fc1(x))); }
  std::uint64_t macs(std::size_t rows) const { return fc1.macs(rows) + fc2.macs(rows); }
  void collect(ParamList& out, const std::string& prefix, bool train_only) const;
};

/// Multi-head self-attention whose token mixing is restricted to row groups.
struct GroupAttention {
  Linear qkv;
  Linear proj;
  std::size_t heads = 1;

  GroupAttention() = default;
  GroupAttention(std::size_t width, std::size_t heads, Rng& rng);

  Var operator()(const Var& x, const RowGroups& groups, std::vector<Tensor>* capture = nullptr) const {
    return proj(grouped_attention(qkv(x), groups, heads, capture));
  }
  std::uint64_t macs(std::size_t rows, const RowGroups& groups) const;
  void collect(ParamList& out, const std::string& prefix, bool train_only) const;
};

/// Pre-norm transformer encoder layer with full attention over its rows.
struct EncoderLayer {
  LayerNorm norm1;
  GroupAttention attn;
  LayerNorm norm2;
  FeedForward mlp;

  EncoderLayer() = default;
  EncoderLayer(std::size_t width, std::size_t heads, Rng& rng);

  Var operator()(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix, bool train_only) const;
};

/// Stack of Linear layers with GELU between them (none after the last).
struct DeepMlp {
  std::vector<Linear> layers;

  DeepMlp() = default;
  DeepMlp(std::size_t in, std::size_t hidden, std::size_t out, std::size_t depth, Rng& rng);

  Var operator()(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix, bool train_only) const;
};

/// Momentum SGD with cosine learning-rate decay and L2
/// weight decay applied to rank-2 weights only.
class SgdMomentum {
 public:
  struct Options {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t total_steps = 1;
    std::size_t warmup_steps = 0;
    bool cosine = true;
    double grad_clip = 0.0;  // global L2 norm; 0 disables
  };

  SgdMomentum(ParamList params, Options options);

  double learning_rate() const;
  /// Applies one update from the accumulated grads, then zeros them.
  void step();
  std::size_t steps_taken() const { return step_; }

 private:
  ParamList params_;
  Options options_;
  std::vector<Tensor> velocity_;
  std::size_t step_ = 0;
};

}  // namespace pivit::nn
