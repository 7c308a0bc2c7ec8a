#include "pivit/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "pivit/error.hpp"

namespace pivit::backbone {

void PatchConfig::validate() const {
  if (frames == 0 || height == 0 || width == 0) throw ConfigError("input dims must be positive");
  if (tau == 0 || patch == 0) throw ConfigError("tau and patch size must be >= 1");
  if (d_v == 0 || layers == 0 || classes == 0 || mlp_ratio == 0) throw ConfigError("d_v, layers, classes must be >= 1");
  if (heads == 0 || d_v % heads != 0) throw ConfigError("d_v must be divisible by heads");
}

Tensor patchify(const data::VideoClip& clip, const PatchConfig& cfg) {
  if (clip.frames != cfg.frames || clip.height != cfg.height || clip.width != cfg.width)
    throw ContractError("clip " + std::to_string(clip.frames) + "x" + std::to_string(clip.height) + "x" +
                        std::to_string(clip.width) + " does not match config " + std::to_string(cfg.frames) + "x" +
                        std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  const std::size_t p = cfg.patch, C = data::VideoClip::kChannels;
  Tensor out = Tensor::matrix(cfg.patch_tokens(), cfg.patch_dim());
  for (std::size_t tv = 0; tv < cfg.temporal_tokens(); ++tv)
    for (std::size_t pr = 0; pr < cfg.patch_rows(); ++pr)
      for (std::size_t pc = 0; pc < cfg.patch_cols(); ++pc) {
        const std::size_t row = tv * cfg.spatial_tokens() + pr * cfg.patch_cols() + pc;
        double* dst = out.data() + row * cfg.patch_dim();
        for (std::size_t dt = 0; dt < cfg.tau; ++dt) {
          const std::size_t t = tv * cfg.tau + dt;
          if (t >= clip.frames) continue;
          for (std::size_t dy = 0; dy < p; ++dy) {
            const std::size_t h = pr * p + dy;
            if (h >= clip.height) continue;
            for (std::size_t dx = 0; dx < p; ++dx) {
              const std::size_t w = pc * p + dx;
              if (w >= clip.width) continue;
              for (std::size_t c = 0; c < C; ++c) dst[((dt * p + dy) * p + dx) * C + c] = clip.at(t, h, w, c);
            }
          }
        }
      }
  return out;
}

VideoTransformer::VideoTransformer(PatchConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg_.d_v;
  patch_embed_ = nn::Linear(cfg_.patch_dim(), d, rng);
  cls_token_ = nn::Var::parameter(nn::truncated_normal({1, d}, nn::kInitStd, rng));
  if (cfg_.distill_token) distill_token_ = nn::Var::parameter(nn::truncated_normal({1, d}, nn::kInitStd, rng));
  pos_embed_ = nn::Var::parameter(Tensor({cfg_.token_rows(), d}, 0.0));
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    Block b;
    b.norm1 = nn::LayerNorm(d);
    if (cfg_.attention == AttentionKind::Divided) b.time_attn = nn::GroupAttention(d, cfg_.heads, rng);
    b.space_attn = nn::GroupAttention(d, cfg_.heads, rng);
    b.norm2 = nn::LayerNorm(d);
    b.mlp = nn::FeedForward(d, cfg_.mlp_ratio * d, rng);
    blocks_.push_back(std::move(b));
  }
  if (cfg_.final_norm) final_norm_ = nn::LayerNorm(d);
  head_ = nn::Linear(d, cfg_.classes, rng);

  const std::size_t S = cfg_.spatial_tokens(), Tv = cfg_.temporal_tokens();
  if (cfg_.attention == AttentionKind::Divided) {
    // Temporal groups: one per spatial location. Spatial groups: one per
    // frame, each including the class (and distillation) token, whose
    // outputs are averaged across frames.
    for (std::size_t s = 0; s < S; ++s) {
      std::vector<std::size_t> g;
      for (std::size_t tv = 0; tv < Tv; ++tv) g.push_back(cfg_.token_row(tv, s));
      time_groups_.push_back(std::move(g));
    }
    for (std::size_t tv = 0; tv < Tv; ++tv) {
      std::vector<std::size_t> g{0};
      for (std::size_t s = 0; s < S; ++s) g.push_back(cfg_.token_row(tv, s));
      if (cfg_.distill_token) g.push_back(cfg_.distill_row());
      space_groups_.push_back(std::move(g));
    }
  } else {
    std::vector<std::size_t> all(cfg_.token_rows());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    space_groups_.push_back(std::move(all));
  }
}

nn::Var VideoTransformer::embed(const data::VideoClip& clip) const {
  nn::Var patches = nn::Var::constant(patchify(clip, cfg_));
  std::vector<nn::Var> rows{cls_token_, patch_embed_(patches)};
  if (cfg_.distill_token) rows.push_back(distill_token_);
  return nn::add(nn::concat_rows(rows), pos_embed_);
}

TokenTensor VideoTransformer::tokenize(const data::VideoClip& clip) const {
  nn::NoGradGuard guard;
  return {embed(clip).value(), 0};
}

nn::Var VideoTransformer::block_forward(const Block& b, const nn::Var& z, std::vector<Tensor>* capture) const {
  nn::Var u = b.norm1(z);
  nn::Var mixed;
  if (cfg_.attention == AttentionKind::Divided) {
    nn::Var temporal = b.time_attn(u, time_groups_, capture);
    mixed = nn::add(temporal, b.space_attn(nn::add(u, temporal), space_groups_, capture));
  } else {
    mixed = b.space_attn(u, space_groups_, capture);
  }
  nn::Var h = nn::add(z, mixed);
  return nn::add(h, b.mlp(b.norm2(h)));
}

VideoTransformer::Trace VideoTransformer::run(const data::VideoClip& clip, const std::set<std::size_t>& taps,
                                              std::vector<std::vector<Tensor>>* attention) const {
  for (std::size_t l : taps)
    if (l < 1 || l > cfg_.layers)
      throw ConfigError("tap layer " + std::to_string(l) + " outside 1.." + std::to_string(cfg_.layers));
  Trace trace;
  nn::Var z = embed(clip);
  if (attention) attention->assign(cfg_.layers, {});
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    z = block_forward(blocks_[l], z, attention ? &(*attention)[l] : nullptr);
    if (taps.contains(l + 1)) trace.taps[l + 1] = z;
  }
  nn::Var cls = nn::gather_rows(z, {0});
  if (cfg_.final_norm) cls = final_norm_(cls);
  trace.logits = head_(cls);
  return trace;
}

BackboneOutput VideoTransformer::forward_with_taps(const data::VideoClip& clip, const std::set<std::size_t>& taps) const {
  nn::NoGradGuard guard;
  Trace t = run(clip, taps);
  BackboneOutput out;
  out.logits = t.logits.value().storage();
  for (auto& [l, v] : t.taps) out.taps[l] = TokenTensor{v.value(), l};
  return out;
}

std::vector<double> VideoTransformer::logits(const data::VideoClip& clip) const {
  nn::NoGradGuard guard;
  return run(clip, {}).logits.value().storage();
}

std::vector<std::vector<Tensor>> VideoTransformer::attention_maps(const data::VideoClip& clip) const {
  nn::NoGradGuard guard;
  std::vector<std::vector<Tensor>> maps;
  run(clip, {}, &maps);
  return maps;
}

nn::ParamList VideoTransformer::parameters() const {
  nn::ParamList out;
  patch_embed_.collect(out, "backbone.patch_embed", false);
  out.push_back({"backbone.cls_token", cls_token_, false});
  if (cfg_.distill_token) out.push_back({"backbone.distill_token", distill_token_, false});
  out.push_back({"backbone.pos_embed", pos_embed_, false});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = "backbone.blocks." + std::to_string(l);
    const Block& b = blocks_[l];
    b.norm1.collect(out, p + ".norm1", false);
    if (cfg_.attention == AttentionKind::Divided) b.time_attn.collect(out, p + ".time_attn", false);
    b.space_attn.collect(out, p + ".space_attn", false);
    b.norm2.collect(out, p + ".norm2", false);
    b.mlp.collect(out, p + ".mlp", false);
  }
  if (cfg_.final_norm) final_norm_.collect(out, "backbone.final_norm", false);
  head_.collect(out, "backbone.head", false);
  return out;
}

std::uint64_t VideoTransformer::macs() const {
  const std::size_t rows = cfg_.token_rows();
  std::uint64_t total = patch_embed_.macs(cfg_.patch_tokens());
  for (const Block& b : blocks_) {
    if (cfg_.attention == AttentionKind::Divided) total += b.time_attn.macs(rows, time_groups_);
    total += b.space_attn.macs(rows, space_groups_);
    total += b.mlp.macs(rows);
  }
  return total + head_.macs(1);
}

nn::Var loss_cls(const nn::Var& logits, std::size_t label) { return nn::cross_entropy(logits, label); }

double loss_cls(const std::vector<double>& logits, std::size_t label) {
  for (double v : logits)
    if (!std::isfinite(v)) throw NumericError("loss_cls: non-finite logits");
  if (label >= logits.size()) throw ContractError("loss_cls: label out of range");
  return nn::log_sum_exp(logits.data(), logits.size()) - logits[label];
}

}  // namespace pivit::backbone
