#include "pivit/sim2d.hpp"

#include <cmath>

#include "pivit/error.hpp"

namespace pivit {

std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::FC:
      return "fc";
    case HeadKind::MLP:
      return "mlp";
    case HeadKind::Transformer:
      return "transformer";
  }
  return "fc";
}

HeadKind parse_head_kind(const std::string& name) {
  if (name == "fc") return HeadKind::FC;
  if (name == "mlp") return HeadKind::MLP;
  if (name == "transformer") return HeadKind::Transformer;
  throw ConfigError("unknown head kind '" + name + "' (expected fc|mlp|transformer)");
}

std::string to_string(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }

Reduction parse_reduction(const std::string& name) {
  if (name == "mean") return Reduction::Mean;
  if (name == "sum") return Reduction::Sum;
  throw ConfigError("unknown reduction '" + name + "' (expected mean|sum)");
}

}  // namespace pivit

namespace pivit::sim2d {

namespace {
constexpr std::size_t kMlpDepth = 4;
constexpr std::size_t kTransformerLayers = 2;

std::size_t encoder_heads(std::size_t width) {
  for (std::size_t h : {4u, 2u})
    if (width % h == 0) return h;
  return 1;
}
}  // namespace

Sim2DHead::Sim2DHead(const Sim2DConfig& cfg, std::size_t d_v, std::size_t joints, std::uint64_t seed)
    : cfg_(cfg), d_v_(d_v) {
  if (cfg_.d_b == 0) cfg_.d_b = d_v;
  if (joints == 0) throw ConfigError("2D-SIM needs at least one joint");
  channels_ = cfg_.variant == skelmap::MapVariant::Flat ? 1 : joints;
  Rng rng(seed);
  switch (cfg_.head_kind) {
    case HeadKind::FC:
      fc_ = nn::Linear(d_v, cfg_.d_b, rng);
      break;
    case HeadKind::MLP:
      mlp_ = nn::DeepMlp(d_v, cfg_.d_b, cfg_.d_b, kMlpDepth, rng);
      break;
    case HeadKind::Transformer:
      tf_in_ = nn::Linear(d_v, cfg_.d_b, rng);
      for (std::size_t i = 0; i < kTransformerLayers; ++i)
        tf_layers_.emplace_back(cfg_.d_b, encoder_heads(cfg_.d_b), rng);
      break;
  }
  classifier_ = nn::Linear(cfg_.d_b, channels_, rng);
  if (cfg_.variant == skelmap::MapVariant::Depth) depth_head_ = nn::Linear(cfg_.d_b, joints, rng);
}

std::vector<std::size_t> patch_rows(const backbone::PatchConfig& cfg) {
  std::vector<std::size_t> rows(cfg.patch_tokens());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = 1 + i;
  return rows;
}

Sim2DHead::Prediction Sim2DHead::predict(const nn::Var& z, const backbone::PatchConfig& cfg) const {
  if (z.value().rows() != cfg.token_rows() || z.value().cols() != d_v_)
    throw ContractError("2D-SIM input " + shape_string(z.shape()) + " does not match config (" +
                        std::to_string(cfg.token_rows()) + " x " + std::to_string(d_v_) + ")");
  nn::Var tokens = nn::gather_rows(z, patch_rows(cfg));
  nn::Var h;
  switch (cfg_.head_kind) {
    case HeadKind::FC:
      h = fc_(tokens);
      break;
    case HeadKind::MLP:
      h = mlp_(tokens);
      break;
    case HeadKind::Transformer:
      h = tf_in_(tokens);
      for (const auto& layer : tf_layers_) h = layer(h);
      break;
  }
  Prediction p{classifier_(h), {}};
  if (cfg_.variant == skelmap::MapVariant::Depth) p.depth = depth_head_(h);
  return p;
}

void Sim2DHead::collect(nn::ParamList& out, const std::string& prefix) const {
  switch (cfg_.head_kind) {
    case HeadKind::FC:
      fc_.collect(out, prefix + ".f2d", true);
      break;
    case HeadKind::MLP:
      mlp_.collect(out, prefix + ".f2d", true);
      break;
    case HeadKind::Transformer:
      tf_in_.collect(out, prefix + ".f2d.in", true);
      for (std::size_t i = 0; i < tf_layers_.size(); ++i)
        tf_layers_[i].collect(out, prefix + ".f2d.layers." + std::to_string(i), true);
      break;
  }
  classifier_.collect(out, prefix + ".classifier", true);
  if (cfg_.variant == skelmap::MapVariant::Depth) depth_head_.collect(out, prefix + ".depth", true);
}

Tensor predict_token_map(const backbone::TokenTensor& z, const Sim2DHead& head, const backbone::PatchConfig& cfg) {
  nn::NoGradGuard guard;
  return head.predict(nn::Var::constant(z.tokens), cfg).logits.value();
}

nn::Var loss_2d(const nn::Var& logits, const skelmap::TokenSkeletonMap& target, Reduction reduction) {
  const Tensor& z = logits.value();
  if (z.rows() != target.tokens() || z.cols() != target.channels)
    throw ContractError("2D-SIM logits " + shape_string(z.shape()) + " do not match map " +
                        std::to_string(target.tokens()) + " x " + std::to_string(target.channels));
  // Per token: (1/J) sum_j BCE. Mean: additionally / tokens.
  double divisor = static_cast<double>(target.channels);
  if (reduction == Reduction::Mean) divisor *= static_cast<double>(target.tokens());
  return nn::bce_with_logits(logits, target.as_tensor(), divisor);
}

nn::Var loss_2d(const Sim2DHead::Prediction& pred, const skelmap::TokenSkeletonMap& target, Reduction reduction,
                double depth_weight) {
  nn::Var loss = loss_2d(pred.logits, target, reduction);
  if (target.variant != skelmap::MapVariant::Depth) return loss;
  if (!pred.depth.defined() || !target.depth) throw ContractError("depth map loss needs depth predictions and targets");
  const Tensor& d = pred.depth.value();
  if (d.size() != target.y.size()) throw ContractError("depth prediction shape mismatch");
  Tensor values = Tensor::matrix(d.rows(), d.cols());
  Tensor mask = Tensor::matrix(d.rows(), d.cols());
  std::size_t count = 0;
  for (std::size_t i = 0; i < target.y.size(); ++i) {
    const double v = (*target.depth)[i];
    if (target.y[i] && std::isfinite(v)) {
      values[i] = v;
      mask[i] = 1.0;
      ++count;
    }
  }
  if (count == 0) return loss;
  return nn::add(loss, nn::scale(nn::masked_squared_error(pred.depth, values, mask, static_cast<double>(count)),
                                 depth_weight));
}

}  // namespace pivit::sim2d
