#include "pivit/layers.hpp"

#include <cmath>
#include <numbers>
#include <unordered_map>

#include "pivit/error.hpp"

namespace pivit::nn {

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().size();
  return n;
}

void zero_grads(ParamList& params) {
  for (auto& p : params) p.var.zero_grad();
}

void copy_values(ParamList& dst, const ParamList& src) {
  std::unordered_map<std::string, const Var*> by_name;
  for (const auto& p : src) by_name[p.name] = &p.var;
  for (auto& p : dst) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ContractError("missing parameter '" + p.name + "'");
    if (it->second->shape() != p.var.shape())
      throw ContractError("parameter '" + p.name + "' has shape " + shape_string(it->second->shape()) +
                          ", expected " + shape_string(p.var.shape()));
    p.var.mutable_value() = it->second->value();
  }
}

Tensor truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.truncated_normal(stddev);
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(Var::parameter(truncated_normal({in, out}, kInitStd, rng))), bias(Var::parameter(Tensor({out}))) {}

void Linear::collect(ParamList& out, const std::string& prefix, bool train_only) const {
  out.push_back({prefix + ".weight", weight, train_only});
  out.push_back({prefix + ".bias", bias, train_only});
}

LayerNorm::LayerNorm(std::size_t width)
    : gamma(Var::parameter(Tensor({width}, 1.0))), beta(Var::parameter(Tensor({width}, 0.0))) {}

void LayerNorm::collect(ParamList& out, const std::string& prefix, bool train_only) const {
  out.push_back({prefix + ".gamma", gamma, train_only});
  out.push_back({prefix + ".beta", beta, train_only});
}

FeedForward::FeedForward(std::size_t width, std::size_t hidden, Rng& rng)
    : fc1(width, hidden, rng), fc2(hidden, width, rng) {}

void FeedForward::collect(ParamList& out, const std::string& prefix, bool train_only) const {
  fc1.collect(out, prefix + ".fc1", train_only);
  fc2.collect(out, prefix + ".fc2", train_only);
}

GroupAttention::GroupAttention(std::size_t width, std::size_t heads_, Rng& rng)
    : qkv(width, 3 * width, rng), proj(width, width, rng), heads(heads_) {
  if (heads == 0 || width % heads != 0) throw ConfigError("attention width must be divisible by head count");
}

std::uint64_t GroupAttention::macs(std::size_t rows, const RowGroups& groups) const {
  const std::uint64_t d = proj.in();
  std::uint64_t mixing = 0;
  // QK^T and PV per group: 2 * n^2 * d over all heads.
  for (const auto& g : groups) mixing += 2ULL * g.size() * g.size() * d;
  return qkv.macs(rows) + proj.macs(rows) + mixing;
}

void GroupAttention::collect(ParamList& out, const std::string& prefix, bool train_only) const {
  qkv.collect(out, prefix + ".qkv", train_only);
  proj.collect(out, prefix + ".proj", train_only);
}

EncoderLayer::EncoderLayer(std::size_t width, std::size_t heads, Rng& rng)
    : norm1(width), attn(width, heads, rng), norm2(width), mlp(width, 4 * width, rng) {}

Var EncoderLayer::operator()(const Var& x) const {
  std::vector<std::size_t> all(x.value().rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Var h = add(x, attn(norm1(x), {all}));
  return add(h, mlp(norm2(h)));
}

void EncoderLayer::collect(ParamList& out, const std::string& prefix, bool train_only) const {
  norm1.collect(out, prefix + ".norm1", train_only);
  attn.collect(out, prefix + ".attn", train_only);
  norm2.collect(out, prefix + ".norm2", train_only);
  mlp.collect(out, prefix + ".mlp", train_only);
}

DeepMlp::DeepMlp(std::size_t in, std::size_t hidden, std::size_t out, std::size_t depth, Rng& rng) {
  if (depth == 0) throw ConfigError("MLP depth must be positive");
  for (std::size_t i = 0; i < depth; ++i)
    layers.emplace_back(i == 0 ? in : hidden, i + 1 == depth ? out : hidden, rng);
}

Var DeepMlp::operator()(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

void DeepMlp::collect(ParamList& out, const std::string& prefix, bool train_only) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + "." + std::to_string(i), train_only);
}

SgdMomentum::SgdMomentum(ParamList params, Options options) : params_(std::move(params)), options_(options) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.var.shape(), 0.0);
}

double SgdMomentum::learning_rate() const {
  const auto total = std::max<std::size_t>(options_.total_steps, 1);
  if (step_ < options_.warmup_steps)
    return options_.lr * static_cast<double>(step_ + 1) / static_cast<double>(options_.warmup_steps);
  if (!options_.cosine) return options_.lr;
  const double progress = std::min(1.0, static_cast<double>(step_) / static_cast<double>(total));
  return 0.5 * options_.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

void SgdMomentum::step() {
  const double lr = learning_rate();
  double clip_scale = 1.0;
  if (options_.grad_clip > 0.0) {
    double sq = 0.0;
    for (auto& p : params_)
      for (double g : p.var.grad().values()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > options_.grad_clip) clip_scale = options_.grad_clip / norm;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& v = params_[i].var;
    Tensor& g = v.grad();
    Tensor& w = v.mutable_value();
    Tensor& m = velocity_[i];
    const bool decay = options_.weight_decay > 0.0 && w.rank() == 2;
    for (std::size_t k = 0; k < w.size(); ++k) {
      double gk = g[k] * clip_scale;
      if (decay) gk += options_.weight_decay * w[k];
      m[k] = options_.momentum * m[k] + gk;
      w[k] -= lr * m[k];
    }
    g.fill(0.0);
  }
  ++step_;
}

}  // namespace pivit::nn
