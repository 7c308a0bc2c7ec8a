#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "pivit/backbone.hpp"
#include "pivit/error.hpp"

using namespace pivit;
using namespace pivit::backbone;

namespace {

PatchConfig small_config() {
  PatchConfig c;
  c.frames = 2;
  c.height = 8;
  c.width = 8;
  c.patch = 4;
  c.d_v = 16;
  c.layers = 2;
  c.heads = 2;
  c.classes = 3;
  return c;
}

data::VideoClip random_clip(const PatchConfig& c, Rng& rng, std::size_t label = 0) {
  data::VideoClip clip("r", c.frames, c.height, c.width, label);
  for (auto& v : clip.pixels) v = rng.uniform();
  return clip;
}

}  // namespace

TEST_CASE("token counts") {
  PatchConfig c;
  CHECK(c.spatial_tokens() == 16);
  CHECK(c.temporal_tokens() == 4);
  CHECK(c.token_rows() == 65);

  c.height = c.width = 224;
  c.patch = 16;
  c.frames = 8;
  CHECK(c.spatial_tokens() == 196);
  CHECK(c.token_rows() == 1569);

  c = {};
  c.height = 33;
  CHECK(c.patch_rows() == 5);
  CHECK(c.patch_cols() == 4);
}

TEST_CASE("token count formula over a randomized sweep") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    PatchConfig c;
    c.frames = 1 + rng.index(9);
    c.height = 1 + rng.index(40);
    c.width = 1 + rng.index(40);
    c.tau = 1 + rng.index(3);
    c.patch = 1 + rng.index(9);
    const std::size_t tv = (c.frames + c.tau - 1) / c.tau;
    const std::size_t sv = ((c.height + c.patch - 1) / c.patch) * ((c.width + c.patch - 1) / c.patch);
    CHECK(c.token_rows() == 1 + tv * sv);
    CHECK(patchify(random_clip(c, rng), c).rows() == tv * sv);
  }
}

TEST_CASE("patchify zero-pads partial edge patches") {
  PatchConfig c;
  c.frames = 3;
  c.height = 5;
  c.width = 3;
  c.patch = 4;
  c.tau = 2;
  data::VideoClip clip("p", 3, 5, 3, 0);
  for (std::size_t i = 0; i < clip.pixels.size(); ++i) clip.pixels[i] = 0.001 * double(i % 997);
  const Tensor x = patchify(clip, c);
  REQUIRE(x.rows() == 2 * 2 * 1);
  REQUIRE(x.cols() == 2 * 4 * 4 * 3);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t tv = r / 2, s = r % 2;
    for (std::size_t dt = 0; dt < 2; ++dt)
      for (std::size_t dy = 0; dy < 4; ++dy)
        for (std::size_t dx = 0; dx < 4; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch) {
            const std::size_t t = tv * 2 + dt, h = s * 4 + dy, w = dx;
            const double want = (t < 3 && h < 5 && w < 3) ? clip.at(t, h, w, ch) : 0.0;
            CHECK(x(r, ((dt * 4 + dy) * 4 + dx) * 3 + ch) == want);
          }
  }
}

TEST_CASE("forward contract") {
  const PatchConfig c = small_config();
  VideoTransformer m(c, 1);
  Rng rng(2);
  const auto clip = random_clip(c, rng);

  const auto out = m.forward_with_taps(clip, {1, c.layers});
  CHECK(out.taps.size() == 2);
  for (const auto& [l, tap] : out.taps) {
    CHECK(tap.layer == l);
    CHECK(tap.tokens.rows() == c.token_rows());
    CHECK(tap.tokens.cols() == c.d_v);
  }
  CHECK(out.logits.size() == c.classes);
  CHECK(m.logits(clip) == out.logits);
  CHECK_THROWS_AS(m.forward_with_taps(clip, {0}), ConfigError);
  CHECK_THROWS_AS(m.forward_with_taps(clip, {c.layers + 1}), ConfigError);
}

TEST_CASE("a zero head outputs its bias") {
  const PatchConfig c = small_config();
  VideoTransformer m(c, 3);
  m.head().weight.mutable_value().fill(0.0);
  m.head().bias.mutable_value().fill(0.3);
  Rng rng(4);
  for (double v : m.logits(random_clip(c, rng))) CHECK(v == 0.3);
}

TEST_CASE("same seed, same weights, same logits") {
  const PatchConfig c = small_config();
  VideoTransformer a(c, 5), b(c, 5), other(c, 6);
  Rng rng(6);
  const auto clip = random_clip(c, rng);
  CHECK(a.logits(clip) == b.logits(clip));
  CHECK(a.logits(clip) != other.logits(clip));
}

TEST_CASE("initialisation") {
  const PatchConfig c = small_config();
  VideoTransformer m(c, 7);
  for (const auto& p : m.parameters()) {
    if (p.name == "backbone.pos_embed") {
      for (double v : p.var.value().values()) CHECK(v == 0.0);
    } else if (p.name.find("weight") != std::string::npos && p.var.value().rank() == 2 &&
               p.name.find("norm") == std::string::npos) {
      for (double v : p.var.value().values()) CHECK(std::abs(v) <= 0.04);
    }
  }
}

TEST_CASE("attention distributions are convex") {
  for (auto kind : {AttentionKind::Divided, AttentionKind::Joint}) {
    PatchConfig c = small_config();
    c.attention = kind;
    VideoTransformer m(c, 8);
    Rng rng(9);
    const auto maps = m.attention_maps(random_clip(c, rng));
    CHECK(maps.size() == c.layers);
    for (const auto& layer : maps)
      for (const auto& a : layer)
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double s = 0.0;
          for (std::size_t k = 0; k < a.cols(); ++k) s += a(r, k);
          CHECK(std::abs(s - 1.0) < 1e-5);
        }
  }
}

TEST_CASE("divided attention groups") {
  const PatchConfig c = small_config();
  VideoTransformer m(c, 1);
  CHECK(m.time_groups().size() == c.spatial_tokens());
  CHECK(m.space_groups().size() == c.temporal_tokens());
  for (const auto& g : m.space_groups()) CHECK(g.front() == 0);
  for (const auto& g : m.time_groups()) CHECK(g.size() == c.temporal_tokens());
}

TEST_CASE("loss_cls") {
  CHECK(loss_cls(std::vector<double>{1, 1, 1, 1}, 2) == doctest::Approx(std::log(4.0)));
  CHECK(loss_cls(std::vector<double>{0, 0, 1e6, 0}, 2) == doctest::Approx(0.0));
  Rng rng(10);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> x(5);
    for (auto& v : x) v = rng.normal(0.0, 3.0);
    CHECK(std::abs(loss_cls(x, 1) - (oracle::log_sum_exp(x) - x[1])) < 1e-10);
  }
  CHECK_THROWS_AS(loss_cls(std::vector<double>{NAN, 0.0}, 0), NumericError);
  CHECK_THROWS_AS(loss_cls(std::vector<double>{0.0, 0.0}, 2), ContractError);
}

TEST_CASE("classification gradient matches finite differences") {
  for (auto kind : {AttentionKind::Divided, AttentionKind::Joint}) {
    PatchConfig c = small_config();
    c.attention = kind;
    VideoTransformer m(c, 12);
    REQUIRE(m.parameter_count() <= 50000);
    // Perturb the zero-initialised parameters so every path carries gradient.
    Rng rng(13);
    for (auto& p : m.parameters())
      for (auto& v : p.var.mutable_value().storage()) v += rng.normal(0.0, 0.05);
    const auto clip = random_clip(c, rng, 1);
    const auto r = oracle::finite_difference(
        m.parameters(), [&] { return loss_cls(m.run(clip, {}).logits, 1); }, 20, 14);
    INFO("worst " << r.worst);
    CHECK(r.max_rel_error <= 1e-5);
  }
}

TEST_CASE("mac count scales with depth") {
  PatchConfig c = small_config();
  const auto one = VideoTransformer(c, 1).macs();
  c.layers = 4;
  const auto four = VideoTransformer(c, 1).macs();
  CHECK(four > one);
  c.layers = 2;
  CHECK(VideoTransformer(c, 1).macs() == VideoTransformer(c, 99).macs());
}

TEST_CASE("config validation") {
  PatchConfig c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(VideoTransformer(c, 0), ConfigError);
  c = small_config();
  c.patch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
