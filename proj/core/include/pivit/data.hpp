#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace pivit::data {

/// RGB clip stored frame-major as T x H x W x 3 with values in [0, 1].
struct VideoClip {
  std::string id;
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  std::size_t label = 0;
  double fps = 30.0;

  static constexpr std::size_t kChannels = 3;

  VideoClip() = default;
  VideoClip(std::string id, std::size_t frames, std::size_t height, std::size_t width, std::size_t label);

  double at(std::size_t t, std::size_t h, std::size_t w, std::size_t c) const {
    return pixels[((t * height + h) * width + w) * kChannels + c];
  }
  double& at(std::size_t t, std::size_t h, std::size_t w, std::size_t c) {
    return pixels[((t * height + h) * width + w) * kChannels + c];
  }

  /// Throws ValidationError on empty dims, non-finite or out-of-range
  /// values, or a label outside [0, num_classes).
  void validate(std::size_t num_classes) const;
};

// Joint records are 0-based in memory; files use 1-based t and j.
struct Joint2D {
  std::size_t t = 0;
  std::size_t j = 0;
  double x = 0.0;  // column, pixels
  double y = 0.0;  // row, pixels
  friend bool operator==(const Joint2D&, const Joint2D&) = default;
};

struct Joint3D {
  std::size_t t = 0;
  std::size_t j = 0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  friend bool operator==(const Joint3D&, const Joint3D&) = default;
};

template <typename Record>
struct SkeletonSequence {
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::vector<Record> entries;

  /// Index bounds, (t, j) uniqueness and finite coordinates.
  void validate() const;
  const Record* find(std::size_t t, std::size_t j) const;
  friend bool operator==(const SkeletonSequence&, const SkeletonSequence&) = default;
};

using Skeleton2DSequence = SkeletonSequence<Joint2D>;
using Skeleton3DSequence = SkeletonSequence<Joint3D>;

struct LabeledSample {
  VideoClip clip;
  std::optional<Skeleton2DSequence> pose2d;
  std::optional<Skeleton3DSequence> pose3d;

  /// Pose timelines must match the clip's frame count.
  void validate(std::size_t num_classes) const;
};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t clips_per_class = 32;
  std::size_t frames = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t joints = 5;
  std::uint64_t seed = 0;
  double motion_amplitude = 5.0;
  double render_radius = 2.0;

  static constexpr std::size_t kMaxClasses = 8;

  /// Throws ConfigError when counts are zero, classes exceed the motion
  /// vocabulary, or the discs cannot be placed inside the frame.
  void validate() const;
};

/// Names of the motion patterns, indexed by class.
const std::vector<std::string>& motion_pattern_names();

// Pose files: first line {"T":int,"J":int,"dims":2|3}, then one record per
// line {"t":int,"j":int,"x":real,"y":real[,"z":real]}.
std::variant<Skeleton2DSequence, Skeleton3DSequence> load_pose_file(const std::filesystem::path& path, int dims);
Skeleton2DSequence parse_pose2d(std::istream& in);
Skeleton3DSequence parse_pose3d(std::istream& in);
void write_pose_file(const std::filesystem::path& path, const Skeleton2DSequence& pose);
void write_pose_file(const std::filesystem::path& path, const Skeleton3DSequence& pose);

/// Output frame i is input frame floor(i * T / target).
std::vector<std::size_t> resample_indices(std::size_t frames, std::size_t target);
VideoClip resample_clip(const VideoClip& clip, std::size_t target_frames);
template <typename Record>
SkeletonSequence<Record> resample_pose(const SkeletonSequence<Record>& pose, const std::vector<std::size_t>& index);
/// Clip and poses resampled on one shared index set.
LabeledSample resample_sample(const LabeledSample& sample, std::size_t target_frames);

std::vector<LabeledSample> generate_synthetic(const SyntheticSpec& spec);

// Clip files: 8-byte magic, u32 T/H/W/channels, u32 label, f64 fps, u32 id
// length + id bytes, then u8 pixels (value * 255, rounded).
void write_clip(const std::filesystem::path& path, const VideoClip& clip);
VideoClip read_clip(const std::filesystem::path& path);

struct Dataset {
  std::size_t num_classes = 0;
  std::vector<LabeledSample> samples;
};

/// Directory layout: dataset.json, index.jsonl, clips/, poses/.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// With `load_poses` false the pose files are neither opened nor required.
Dataset read_dataset(const std::filesystem::path& dir, bool load_poses = true);

inline constexpr const char* kPoseSchemaTag = "pivit-pose/1";
inline constexpr const char* kDatasetFormatTag = "pivit-dataset/1";
inline constexpr const char* kClipFormatTag = "pivit-clip/1";

}  // namespace pivit::data
