#include "pivit/skelmap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pivit/binio.hpp"
#include "pivit/error.hpp"
#include "pivit/rng.hpp"

namespace pivit::skelmap {

std::size_t PixelJointMap::popcount() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::string to_string(MapVariant v) {
  switch (v) {
    case MapVariant::Full:
      return "full";
    case MapVariant::Flat:
      return "flat";
    case MapVariant::Depth:
      return "depth";
  }
  return "full";
}

MapVariant parse_variant(const std::string& name) {
  if (name == "full") return MapVariant::Full;
  if (name == "flat") return MapVariant::Flat;
  if (name == "depth") return MapVariant::Depth;
  throw ConfigError("unknown map variant '" + name + "' (expected full|flat|depth)");
}

Tensor TokenSkeletonMap::as_tensor() const {
  Tensor t = Tensor::matrix(tokens(), channels);
  for (std::size_t i = 0; i < y.size(); ++i) t[i] = y[i];
  return t;
}

std::vector<std::size_t> TokenSkeletonMap::joint_tokens() const {
  std::vector<std::size_t> out;
  for (std::size_t tok = 0; tok < tokens(); ++tok)
    for (std::size_t j = 0; j < channels; ++j)
      if (y[tok * channels + j]) {
        out.push_back(tok);
        break;
      }
  return out;
}

namespace {

/// Integer pixel of a joint, or nullopt when it falls outside the frame.
std::optional<std::pair<std::size_t, std::size_t>> pixel_of(double x, double y, std::size_t height, std::size_t width) {
  const double fy = std::floor(y), fx = std::floor(x);
  if (!(fy >= 0.0 && fx >= 0.0 && fy < static_cast<double>(height) && fx < static_cast<double>(width)))
    return std::nullopt;
  return std::make_pair(static_cast<std::size_t>(fy), static_cast<std::size_t>(fx));
}

}  // namespace

PixelJointMap build_pixel_map(const data::Skeleton2DSequence& pose, std::size_t frames, std::size_t height,
                              std::size_t width, std::size_t dilation) {
  if (pose.frames != frames) throw ContractError("pose timeline differs from map frame count");
  PixelJointMap m{frames, height, width, pose.joints, {}};
  m.bits.assign(frames * height * width * pose.joints, 0);
  const long r = static_cast<long>(dilation);
  for (const auto& e : pose.entries) {
    if (e.t >= frames || e.j >= pose.joints) throw ValidationError("pose entry outside [1,T]x[1,J]");
    const auto px = pixel_of(e.x, e.y, height, width);
    if (!px) continue;
    const auto [h0, w0] = *px;
    for (long dh = -r; dh <= r; ++dh)
      for (long dw = -r; dw <= r; ++dw) {
        const long h = static_cast<long>(h0) + dh, w = static_cast<long>(w0) + dw;
        if (h < 0 || w < 0 || h >= static_cast<long>(height) || w >= static_cast<long>(width)) continue;
        m.bits[((e.t * height + static_cast<std::size_t>(h)) * width + static_cast<std::size_t>(w)) * pose.joints +
               e.j] = 1;
      }
  }
  return m;
}

TokenSkeletonMap pool_token_map(const PixelJointMap& m, const backbone::PatchConfig& cfg) {
  if (m.frames != cfg.frames || m.height != cfg.height || m.width != cfg.width)
    throw ContractError("pixel map dims do not match patch config");
  TokenSkeletonMap out;
  out.temporal = cfg.temporal_tokens();
  out.spatial = cfg.spatial_tokens();
  out.channels = m.joints;
  out.variant = MapVariant::Full;
  out.y.assign(out.temporal * out.spatial * out.channels, 0);
  const std::size_t p = cfg.patch;
  for (std::size_t t = 0; t < m.frames; ++t)
    for (std::size_t h = 0; h < m.height; ++h)
      for (std::size_t w = 0; w < m.width; ++w) {
        const std::uint8_t* src = m.bits.data() + ((t * m.height + h) * m.width + w) * m.joints;
        const std::size_t s = (h / p) * cfg.patch_cols() + (w / p);
        std::uint8_t* dst = out.y.data() + out.index(t / cfg.tau, s, 0);
        for (std::size_t j = 0; j < m.joints; ++j) dst[j] |= src[j];
      }
  return out;
}

TokenSkeletonMap build_token_map(const data::Skeleton2DSequence& pose, const backbone::PatchConfig& cfg,
                                 std::size_t dilation) {
  return pool_token_map(build_pixel_map(pose, cfg.frames, cfg.height, cfg.width, dilation), cfg);
}

TokenSkeletonMap make_variant(const TokenSkeletonMap& full, MapVariant variant, const backbone::PatchConfig& cfg,
                              const data::Skeleton2DSequence* pose2d, const data::Skeleton3DSequence* pose3d) {
  if (full.variant != MapVariant::Full) throw ContractError("make_variant expects a full token-skeleton map");
  switch (variant) {
    case MapVariant::Full:
      return full;
    case MapVariant::Flat: {
      TokenSkeletonMap out;
      out.temporal = full.temporal;
      out.spatial = full.spatial;
      out.channels = 1;
      out.variant = MapVariant::Flat;
      out.y.assign(full.tokens(), 0);
      for (std::size_t tok = 0; tok < full.tokens(); ++tok)
        for (std::size_t j = 0; j < full.channels; ++j) out.y[tok] |= full.y[tok * full.channels + j];
      return out;
    }
    case MapVariant::Depth: {
      if (!pose3d) throw ConfigError("depth map variant requires a 3D pose");
      if (!pose2d) throw ConfigError("depth map variant requires the 2D pose that built the map");
      TokenSkeletonMap out = full;
      out.variant = MapVariant::Depth;
      std::vector<double> depth(full.y.size(), std::numeric_limits<double>::quiet_NaN());
      for (const auto& e3 : pose3d->entries) {
        const data::Joint2D* e2 = pose2d->find(e3.t, e3.j);
        if (!e2 || e3.j >= full.channels) continue;
        const auto px = pixel_of(e2->x, e2->y, cfg.height, cfg.width);
        if (!px) continue;
        const std::size_t s = (px->first / cfg.patch) * cfg.patch_cols() + px->second / cfg.patch;
        const std::size_t idx = full.index(e3.t / cfg.tau, s, e3.j);
        if (!full.y[idx]) continue;
        if (std::isnan(depth[idx]) || e3.z < depth[idx]) depth[idx] = e3.z;
      }
      out.depth = std::move(depth);
      return out;
    }
  }
  return full;
}

data::Skeleton2DSequence add_pixel_noise(const data::Skeleton2DSequence& pose, double level, std::uint64_t seed) {
  if (!(level >= 0.0)) throw ConfigError("pixel noise level must be >= 0");
  if (level == 0.0) return pose;
  Rng rng(seed);
  data::Skeleton2DSequence out = pose;
  for (auto& e : out.entries) {
    e.x += rng.uniform(0.0, level);
    e.y += rng.uniform(0.0, level);
  }
  return out;
}

double map_iou(const TokenSkeletonMap& a, const TokenSkeletonMap& b) {
  if (a.y.size() != b.y.size()) throw ContractError("map_iou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.y.size(); ++i) {
    inter += (a.y[i] & b.y[i]);
    uni += (a.y[i] | b.y[i]);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {
constexpr char kMapMagic[9] = "PVMAP001";
}

void write_map_file(const std::filesystem::path& path, const TokenSkeletonMap& map) {
  auto out = binio::open_out(path);
  binio::put_magic(out, kMapMagic);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.temporal));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.spatial));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(map.channels));
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(map.variant));
  std::vector<std::uint8_t> packed((map.y.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < map.y.size(); ++i)
    if (map.y[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  out.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  if (map.variant == MapVariant::Depth) {
    if (!map.depth || map.depth->size() != map.y.size()) throw ContractError("depth map without depth values");
    out.write(reinterpret_cast<const char*>(map.depth->data()),
              static_cast<std::streamsize>(map.depth->size() * sizeof(double)));
  }
  if (!out) throw Error("failed writing map '" + path.string() + "'");
}

TokenSkeletonMap read_map_file(const std::filesystem::path& path) {
  auto in = binio::open_in(path);
  binio::expect_magic(in, kMapMagic, "token-skeleton map");
  TokenSkeletonMap map;
  map.temporal = binio::get<std::uint32_t>(in);
  map.spatial = binio::get<std::uint32_t>(in);
  map.channels = binio::get<std::uint32_t>(in);
  const auto v = binio::get<std::uint8_t>(in);
  if (v > static_cast<std::uint8_t>(MapVariant::Depth)) throw ParseError("unknown map variant tag");
  map.variant = static_cast<MapVariant>(v);
  const std::size_t n = map.temporal * map.spatial * map.channels;
  std::vector<std::uint8_t> packed((n + 7) / 8);
  in.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  if (!in) throw ParseError("map file truncated");
  map.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) map.y[i] = (packed[i / 8] >> (i % 8)) & 1u;
  if (map.variant == MapVariant::Depth) {
    std::vector<double> depth(n);
    in.read(reinterpret_cast<char*>(depth.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw ParseError("map file depth payload truncated");
    map.depth = std::move(depth);
  }
  return map;
}

}  // namespace pivit::skelmap
