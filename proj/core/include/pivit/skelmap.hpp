#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pivit/backbone.hpp"
#include "pivit/data.hpp"

namespace pivit::skelmap {

/// Binary T x H x W x J occupancy of joints at pixel resolution.
struct PixelJointMap {
  std::size_t frames = 0, height = 0, width = 0, joints = 0;
  std::vector<std::uint8_t> bits;

  std::uint8_t at(std::size_t t, std::size_t h, std::size_t w, std::size_t j) const {
    return bits[((t * height + h) * width + w) * joints + j];
  }
  std::size_t popcount() const;
};

enum class MapVariant { Full, Flat, Depth };

std::string to_string(MapVariant v);
MapVariant parse_variant(const std::string& name);

/// Token-level joint occupancy, T_v x S_v x channels; channels is J (full,
/// depth) or 1 (flat). Depth maps carry one depth per set bit, NaN elsewhere.
struct TokenSkeletonMap {
  std::size_t temporal = 0, spatial = 0, channels = 0;
  MapVariant variant = MapVariant::Full;
  std::vector<std::uint8_t> y;
  std::optional<std::vector<double>> depth;

  std::size_t index(std::size_t tv, std::size_t s, std::size_t j) const { return (tv * spatial + s) * channels + j; }
  std::uint8_t at(std::size_t tv, std::size_t s, std::size_t j) const { return y[index(tv, s, j)]; }
  std::size_t tokens() const { return temporal * spatial; }
  /// y as a (T_v*S_v) x channels tensor of 0/1 values.
  Tensor as_tensor() const;
  /// Tokens with at least one set channel, in token order.
  std::vector<std::size_t> joint_tokens() const;

  friend bool operator==(const TokenSkeletonMap&, const TokenSkeletonMap&) = default;
};

/// Entries are floored to integer (h, w); entries outside the frame are
/// dropped. `dilation` > 0 additionally marks pixels within that Chebyshev
/// radius.
PixelJointMap build_pixel_map(const data::Skeleton2DSequence& pose, std::size_t frames, std::size_t height,
                              std::size_t width, std::size_t dilation = 0);

/// Max pool over tau x p x p windows (edge windows truncated).
TokenSkeletonMap pool_token_map(const PixelJointMap& m, const backbone::PatchConfig& cfg);

/// Convenience: pixel map + pooling in one call.
TokenSkeletonMap build_token_map(const data::Skeleton2DSequence& pose, const backbone::PatchConfig& cfg,
                                 std::size_t dilation = 0);

/// Flat collapses joints with OR. Depth keeps y and attaches, per set bit,
/// the minimum z among 3D entries whose 2D position falls in that window.
/// Full returns the input unchanged.
TokenSkeletonMap make_variant(const TokenSkeletonMap& full, MapVariant variant, const backbone::PatchConfig& cfg,
                              const data::Skeleton2DSequence* pose2d, const data::Skeleton3DSequence* pose3d);

/// Adds independent U[0, level] offsets to x and y of every entry.
data::Skeleton2DSequence add_pixel_noise(const data::Skeleton2DSequence& pose, double level, std::uint64_t seed);

/// |a AND b| / |a OR b| over all bits; 1 when both are empty.
double map_iou(const TokenSkeletonMap& a, const TokenSkeletonMap& b);

// Cached map file: 8-byte magic, u32 T_v, S_v, J, u8 variant, bit-packed
// payload (LSB first) row-major in (t, s, j); depth maps append f64 depths.
void write_map_file(const std::filesystem::path& path, const TokenSkeletonMap& map);
TokenSkeletonMap read_map_file(const std::filesystem::path& path);

inline constexpr const char* kMapFormatTag = "pivit-map/1";

}  // namespace pivit::skelmap
