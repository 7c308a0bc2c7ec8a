#include "pivit/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <set>
#include <sstream>

#include "pivit/binio.hpp"
#include "pivit/error.hpp"
#include "pivit/rng.hpp"

namespace pivit::data {

using nlohmann::json;

VideoClip::VideoClip(std::string id_, std::size_t frames_, std::size_t height_, std::size_t width_,
                     std::size_t label_)
    : id(std::move(id_)),
      frames(frames_),
      height(height_),
      width(width_),
      pixels(frames_ * height_ * width_ * kChannels, 0.0),
      label(label_) {}

void VideoClip::validate(std::size_t num_classes) const {
  if (frames == 0 || height == 0 || width == 0) throw ValidationError("clip '" + id + "' has an empty dimension");
  if (pixels.size() != frames * height * width * kChannels)
    throw ValidationError("clip '" + id + "' pixel buffer does not match its dimensions");
  for (double v : pixels)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw ValidationError("clip '" + id + "' has a pixel outside [0,1]");
  if (label >= num_classes)
    throw ValidationError("clip '" + id + "' label " + std::to_string(label) + " >= class count " +
                          std::to_string(num_classes));
  if (!(fps > 0.0)) throw ValidationError("clip '" + id + "' fps must be positive");
}

namespace {

bool finite_coords(const Joint2D& r) { return std::isfinite(r.x) && std::isfinite(r.y); }
bool finite_coords(const Joint3D& r) { return std::isfinite(r.x) && std::isfinite(r.y) && std::isfinite(r.z); }

}  // namespace

template <typename Record>
void SkeletonSequence<Record>::validate() const {
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& r : entries) {
    if (r.t >= frames || r.j >= joints)
      throw ValidationError("joint record (t=" + std::to_string(r.t + 1) + ", j=" + std::to_string(r.j + 1) +
                            ") outside T=" + std::to_string(frames) + ", J=" + std::to_string(joints));
    if (!finite_coords(r)) throw ValidationError("joint record has non-finite coordinates");
    if (!seen.emplace(r.t, r.j).second)
      throw ValidationError("duplicate joint record (t=" + std::to_string(r.t + 1) + ", j=" +
                            std::to_string(r.j + 1) + ")");
  }
}

template <typename Record>
const Record* SkeletonSequence<Record>::find(std::size_t t, std::size_t j) const {
  for (const auto& r : entries)
    if (r.t == t && r.j == j) return &r;
  return nullptr;
}

template struct SkeletonSequence<Joint2D>;
template struct SkeletonSequence<Joint3D>;

void LabeledSample::validate(std::size_t num_classes) const {
  clip.validate(num_classes);
  if (pose2d) {
    pose2d->validate();
    if (pose2d->frames != clip.frames) throw ValidationError("2D pose timeline differs from clip '" + clip.id + "'");
  }
  if (pose3d) {
    pose3d->validate();
    if (pose3d->frames != clip.frames) throw ValidationError("3D pose timeline differs from clip '" + clip.id + "'");
  }
}

// ---------------------------------------------------------------------------
// Pose files

namespace {

std::size_t require_index(const json& rec, const char* key, long line) {
  auto it = rec.find(key);
  if (it == rec.end() || !it->is_number_integer())
    throw ParseError(std::string("missing or non-integer '") + key + "'", line);
  const auto v = it->get<long long>();
  if (v < 1) throw ValidationError(std::string("'") + key + "' must be >= 1 (line " + std::to_string(line) + ")");
  return static_cast<std::size_t>(v - 1);
}

double require_real(const json& rec, const char* key, long line) {
  auto it = rec.find(key);
  if (it == rec.end() || !it->is_number()) throw ParseError(std::string("missing or non-numeric '") + key + "'", line);
  return it->get<double>();
}

struct Header {
  std::size_t frames;
  std::size_t joints;
  int dims;
};

Header parse_header(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty pose file", 1);
  json h;
  try {
    h = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed header: ") + e.what(), 1);
  }
  if (!h.is_object() || !h.contains("T") || !h.contains("J") || !h.contains("dims") || !h["T"].is_number_integer() ||
      !h["J"].is_number_integer() || !h["dims"].is_number_integer())
    throw ParseError("header must be {\"T\":int,\"J\":int,\"dims\":2|3}", 1);
  const auto t = h["T"].get<long long>(), j = h["J"].get<long long>();
  const int dims = h["dims"].get<int>();
  if (t < 1 || j < 1) throw ValidationError("header T and J must be positive");
  if (dims != 2 && dims != 3) throw ParseError("header dims must be 2 or 3", 1);
  return {static_cast<std::size_t>(t), static_cast<std::size_t>(j), dims};
}

template <typename Record>
SkeletonSequence<Record> parse_body(std::istream& in, const Header& header) {
  constexpr bool is3d = std::is_same_v<Record, Joint3D>;
  SkeletonSequence<Record> seq;
  seq.frames = header.frames;
  seq.joints = header.joints;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::string line;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), lineno);
    }
    if (!rec.is_object()) throw ParseError("record must be an object", lineno);
    Record r;
    r.t = require_index(rec, "t", lineno);
    r.j = require_index(rec, "j", lineno);
    r.x = require_real(rec, "x", lineno);
    r.y = require_real(rec, "y", lineno);
    if constexpr (is3d) r.z = require_real(rec, "z", lineno);
    if (r.t >= seq.frames || r.j >= seq.joints)
      throw ValidationError("record (t=" + std::to_string(r.t + 1) + ", j=" + std::to_string(r.j + 1) +
                            ") exceeds header bounds T=" + std::to_string(seq.frames) + ", J=" +
                            std::to_string(seq.joints) + " (line " + std::to_string(lineno) + ")");
    if (!seen.emplace(r.t, r.j).second)
      throw ValidationError("duplicate record (t=" + std::to_string(r.t + 1) + ", j=" + std::to_string(r.j + 1) +
                            ") (line " + std::to_string(lineno) + ")");
    seq.entries.push_back(r);
  }
  seq.validate();
  return seq;
}

template <typename Record>
void write_pose(const std::filesystem::path& path, const SkeletonSequence<Record>& pose) {
  constexpr bool is3d = std::is_same_v<Record, Joint3D>;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << json{{"T", pose.frames}, {"J", pose.joints}, {"dims", is3d ? 3 : 2}}.dump() << '\n';
  for (const auto& r : pose.entries) {
    json rec = {{"t", r.t + 1}, {"j", r.j + 1}, {"x", r.x}, {"y", r.y}};
    if constexpr (is3d) rec["z"] = r.z;
    out << rec.dump() << '\n';
  }
}

}  // namespace

Skeleton2DSequence parse_pose2d(std::istream& in) {
  const Header h = parse_header(in);
  if (h.dims != 2) throw ValidationError("expected a 2D pose file, header declares dims=3");
  return parse_body<Joint2D>(in, h);
}

Skeleton3DSequence parse_pose3d(std::istream& in) {
  const Header h = parse_header(in);
  if (h.dims != 3) throw ValidationError("expected a 3D pose file, header declares dims=2");
  return parse_body<Joint3D>(in, h);
}

std::variant<Skeleton2DSequence, Skeleton3DSequence> load_pose_file(const std::filesystem::path& path, int dims) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open pose file '" + path.string() + "'");
  if (dims == 2) return parse_pose2d(in);
  if (dims == 3) return parse_pose3d(in);
  throw ConfigError("pose dims must be 2 or 3");
}

void write_pose_file(const std::filesystem::path& path, const Skeleton2DSequence& pose) { write_pose(path, pose); }
void write_pose_file(const std::filesystem::path& path, const Skeleton3DSequence& pose) { write_pose(path, pose); }

// ---------------------------------------------------------------------------
// Temporal resampling

std::vector<std::size_t> resample_indices(std::size_t frames, std::size_t target) {
  if (target == 0) throw ConfigError("target frame count must be >= 1");
  std::vector<std::size_t> idx(target);
  for (std::size_t i = 0; i < target; ++i) idx[i] = i * frames / target;
  return idx;
}

VideoClip resample_clip(const VideoClip& clip, std::size_t target_frames) {
  const auto idx = resample_indices(clip.frames, target_frames);
  VideoClip out(clip.id, target_frames, clip.height, clip.width, clip.label);
  out.fps = clip.fps;
  const std::size_t frame_size = clip.height * clip.width * VideoClip::kChannels;
  for (std::size_t i = 0; i < target_frames; ++i)
    std::copy_n(clip.pixels.begin() + static_cast<std::ptrdiff_t>(idx[i] * frame_size), frame_size,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(i * frame_size));
  return out;
}

template <typename Record>
SkeletonSequence<Record> resample_pose(const SkeletonSequence<Record>& pose, const std::vector<std::size_t>& index) {
  SkeletonSequence<Record> out;
  out.frames = index.size();
  out.joints = pose.joints;
  for (std::size_t i = 0; i < index.size(); ++i)
    for (const auto& r : pose.entries)
      if (r.t == index[i]) {
        Record copy = r;
        copy.t = i;
        out.entries.push_back(copy);
      }
  return out;
}

template Skeleton2DSequence resample_pose(const Skeleton2DSequence&, const std::vector<std::size_t>&);
template Skeleton3DSequence resample_pose(const Skeleton3DSequence&, const std::vector<std::size_t>&);

LabeledSample resample_sample(const LabeledSample& sample, std::size_t target_frames) {
  const auto idx = resample_indices(sample.clip.frames, target_frames);
  LabeledSample out;
  out.clip = resample_clip(sample.clip, target_frames);
  if (sample.pose2d) out.pose2d = resample_pose(*sample.pose2d, idx);
  if (sample.pose3d) out.pose3d = resample_pose(*sample.pose3d, idx);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic motion dataset

namespace {

enum class Motion { Static, Linear, CircleCcw, Oscillate, Expand, CircleCw, Contract, Zigzag };

struct Offset {
  double dx, dy, dz;
};

struct ClipMotion {
  Motion kind;
  double amplitude;
  double direction;  // radians
  double phase;      // radians
  double sign;       // +-1
};

double margin(const SyntheticSpec& s) { return s.render_radius + s.motion_amplitude; }

/// Displacement at frame `t`; (rx, ry) is the unit vector from the joints'
/// centroid to this joint's base position.
Offset displacement(const ClipMotion& m, double t, std::size_t frames, double rx, double ry) {
  const double T = static_cast<double>(frames);
  const double u = frames > 1 ? t / (T - 1.0) : 0.0;
  const double ux = std::cos(m.direction), uy = std::sin(m.direction);
  const double A = m.amplitude;
  const double two_pi = 2.0 * std::numbers::pi;
  switch (m.kind) {
    case Motion::Static:
      return {0.0, 0.0, 0.0};
    case Motion::Linear:
      return {A * (2.0 * u - 1.0) * ux, A * (2.0 * u - 1.0) * uy, 0.3 * (2.0 * u - 1.0)};
    case Motion::CircleCcw: {
      const double a = m.phase + two_pi * t / T;
      return {A * std::cos(a), A * std::sin(a), 0.3 * std::sin(a)};
    }
    case Motion::CircleCw: {
      const double a = m.phase - two_pi * t / T;
      return {A * std::cos(a), A * std::sin(a), -0.3 * std::sin(a)};
    }
    case Motion::Oscillate: {
      const double s = m.sign * std::cos(2.0 * two_pi * t / T);
      return {A * s * ux, A * s * uy, 0.2 * s};
    }
    case Motion::Expand:
      return {A * u * rx, A * u * ry, -0.4 * u};
    case Motion::Contract:
      return {-A * u * rx, -A * u * ry, 0.4 * u};
    case Motion::Zigzag: {
      const double along = 0.5 * (2.0 * u - 1.0);
      const double across = 0.5 * m.sign * std::cos(2.0 * two_pi * t / T);
      return {A * (along * ux - across * uy), A * (along * uy + across * ux), 0.15 * across};
    }
  }
  return {0.0, 0.0, 0.0};
}

/// Per-joint colour; the channel mean is constant so every joint is equally
/// bright and only position distinguishes classes.
std::array<double, 3> joint_colour(std::size_t j, std::size_t joints) {
  std::array<double, 3> c{};
  const double base = static_cast<double>(j) / static_cast<double>(joints);
  for (std::size_t k = 0; k < 3; ++k)
    c[k] = 0.45 + 0.55 * (0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * (base + static_cast<double>(k) / 3.0)));
  return c;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

LabeledSample make_sample(const SyntheticSpec& spec, std::size_t label, std::size_t k, Rng rng) {
  const std::size_t T = spec.frames, H = spec.height, W = spec.width, J = spec.joints;
  std::ostringstream id;
  id << "s" << spec.seed << "_c" << label << "_" << k;
  LabeledSample s;
  s.clip = VideoClip(id.str(), T, H, W, label);

  ClipMotion motion{static_cast<Motion>(label), spec.motion_amplitude, rng.uniform(0.0, 2.0 * std::numbers::pi),
                    rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform() < 0.5 ? -1.0 : 1.0};

  // Every clip shares one joint layout (a ring around the frame centre),
  // shifted and jittered by a few pixels.
  const double m = margin(spec);
  const double ring = std::max(0.0, 0.5 * std::min(static_cast<double>(H), static_cast<double>(W)) - m - 3.0);
  const double shift_x = rng.uniform(-2.0, 2.0), shift_y = rng.uniform(-2.0, 2.0);
  std::vector<double> bx(J), by(J);
  double cx = 0.0, cy = 0.0;
  for (std::size_t j = 0; j < J; ++j) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(J) - 0.5 * std::numbers::pi;
    const double x = 0.5 * static_cast<double>(W) + ring * std::cos(a) + shift_x + rng.uniform(-1.0, 1.0);
    const double y = 0.5 * static_cast<double>(H) + ring * std::sin(a) + shift_y + rng.uniform(-1.0, 1.0);
    bx[j] = std::clamp(x, m, static_cast<double>(W) - m);
    by[j] = std::clamp(y, m, static_cast<double>(H) - m);
    cx += bx[j] / static_cast<double>(J);
    cy += by[j] / static_cast<double>(J);
  }
  const double depth = rng.uniform(2.5, 3.5);

  std::vector<double> rx(J), ry(J);
  for (std::size_t j = 0; j < J; ++j) {
    rx[j] = bx[j] - cx;
    ry[j] = by[j] - cy;
    const double norm = std::hypot(rx[j], ry[j]);
    if (norm > 1e-9) {
      rx[j] /= norm;
      ry[j] /= norm;
    } else {
      rx[j] = 1.0;
      ry[j] = 0.0;
    }
  }

  Skeleton2DSequence p2;
  Skeleton3DSequence p3;
  p2.frames = p3.frames = T;
  p2.joints = p3.joints = J;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < J; ++j) {
      const Offset o = displacement(motion, static_cast<double>(t), T, rx[j], ry[j]);
      const double x = bx[j] + o.dx, y = by[j] + o.dy;
      const double z = depth + 0.1 * static_cast<double>(j) + o.dz;
      p2.entries.push_back({t, j, x, y});
      const double f = 0.01 * z;
      p3.entries.push_back({t, j, (x - 0.5 * static_cast<double>(W)) * f, (0.5 * static_cast<double>(H) - y) * f, z});
    }

  // Background: dark with per-pixel noise. Each disc leaves a fading trail
  // over the preceding half frame interval (motion blur).
  for (auto& v : s.clip.pixels) v = 0.04 + rng.uniform(0.0, 0.04);
  const double r = spec.render_radius;
  constexpr std::size_t kTrail = 8;
  constexpr double kExposure = 0.5;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < J; ++j) {
      const auto colour = joint_colour(j, J);
      for (std::size_t k = kTrail; k-- > 0;) {
        const double back = static_cast<double>(k) / static_cast<double>(kTrail - 1);
        const Offset o = displacement(motion, static_cast<double>(t) - kExposure * back, T, rx[j], ry[j]);
        const double ex = bx[j] + o.dx, ey = by[j] + o.dy, fade = 1.0 - 0.7 * back;
        const auto h0 = static_cast<long>(std::floor(ey - r - 1.0)), h1 = static_cast<long>(std::ceil(ey + r + 1.0));
        const auto w0 = static_cast<long>(std::floor(ex - r - 1.0)), w1 = static_cast<long>(std::ceil(ex + r + 1.0));
        for (long h = std::max(0L, h0); h <= std::min(static_cast<long>(H) - 1, h1); ++h)
          for (long w = std::max(0L, w0); w <= std::min(static_cast<long>(W) - 1, w1); ++w) {
            const double dy = static_cast<double>(h) + 0.5 - ey, dx = static_cast<double>(w) + 0.5 - ex;
            if (dx * dx + dy * dy > r * r) continue;
            for (std::size_t c = 0; c < 3; ++c) {
              double& px = s.clip.at(t, static_cast<std::size_t>(h), static_cast<std::size_t>(w), c);
              px = std::max(px, fade * colour[c]);
            }
          }
      }
    }
  for (auto& v : s.clip.pixels) v = quantize(v);

  s.pose2d = std::move(p2);
  s.pose3d = std::move(p3);
  return s;
}

}  // namespace

const std::vector<std::string>& motion_pattern_names() {
  static const std::vector<std::string> names = {"static", "linear",     "circle-ccw", "oscillate",
                                                 "expand", "circle-cw", "contract",   "zigzag"};
  return names;
}

void SyntheticSpec::validate() const {
  if (num_classes == 0 || clips_per_class == 0 || frames == 0 || height == 0 || width == 0 || joints == 0)
    throw ConfigError("synthetic spec counts must be positive");
  if (num_classes > kMaxClasses)
    throw ConfigError("synthetic spec supports at most " + std::to_string(kMaxClasses) + " motion classes");
  if (!(render_radius >= 1.0)) throw ConfigError("render_radius must be >= 1 pixel");
  if (!(motion_amplitude >= 0.0)) throw ConfigError("motion_amplitude must be non-negative");
  const double m = margin(*this);
  const double usable_h = static_cast<double>(height) - 2.0 * m;
  const double usable_w = static_cast<double>(width) - 2.0 * m;
  const double disc_area = static_cast<double>(joints) * (2.0 * render_radius) * (2.0 * render_radius);
  if (usable_h <= 0.0 || usable_w <= 0.0 || disc_area > static_cast<double>(height * width))
    throw ConfigError("cannot fit " + std::to_string(joints) + " discs of radius " + std::to_string(render_radius) +
                      " moving by " + std::to_string(motion_amplitude) + " px inside a " + std::to_string(height) +
                      "x" + std::to_string(width) + " frame");
}

std::vector<LabeledSample> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  std::vector<LabeledSample> out;
  out.reserve(spec.num_classes * spec.clips_per_class);
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    for (std::size_t k = 0; k < spec.clips_per_class; ++k)
      out.push_back(make_sample(spec, c, k, root.fork(c * 1'000'003ULL + k)));
  return out;
}

// ---------------------------------------------------------------------------
// Clip and dataset files

namespace {
constexpr char kClipMagic[9] = "PVCLIP01";
}

void write_clip(const std::filesystem::path& path, const VideoClip& clip) {
  auto out = binio::open_out(path);
  binio::put_magic(out, kClipMagic);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.frames));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.height));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.width));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(VideoClip::kChannels));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(clip.label));
  binio::put<double>(out, clip.fps);
  binio::put_string(out, clip.id);
  std::vector<std::uint8_t> bytes(clip.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(clip.pixels[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing clip '" + path.string() + "'");
}

VideoClip read_clip(const std::filesystem::path& path) {
  auto in = binio::open_in(path);
  binio::expect_magic(in, kClipMagic, "clip");
  const auto T = binio::get<std::uint32_t>(in), H = binio::get<std::uint32_t>(in), W = binio::get<std::uint32_t>(in);
  const auto C = binio::get<std::uint32_t>(in);
  if (C != VideoClip::kChannels) throw ParseError("clip '" + path.string() + "' is not 3-channel");
  const auto label = binio::get<std::uint32_t>(in);
  const double fps = binio::get<double>(in);
  VideoClip clip(binio::get_string(in), T, H, W, label);
  clip.fps = fps;
  std::vector<std::uint8_t> bytes(clip.pixels.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw ParseError("clip '" + path.string() + "' is truncated");
  for (std::size_t i = 0; i < bytes.size(); ++i) clip.pixels[i] = static_cast<double>(bytes[i]) / 255.0;
  return clip;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "clips");
  fs::create_directories(dir / "poses");
  {
    std::ofstream meta(dir / "dataset.json", std::ios::trunc);
    meta << json{{"format", kDatasetFormatTag},
                 {"num_classes", dataset.num_classes},
                 {"samples", dataset.samples.size()}}
                .dump(2)
         << '\n';
  }
  std::ofstream index(dir / "index.jsonl", std::ios::trunc);
  if (!index) throw Error("cannot write dataset index in '" + dir.string() + "'");
  for (const auto& s : dataset.samples) {
    const std::string clip_rel = "clips/" + s.clip.id + ".clip";
    write_clip(dir / clip_rel, s.clip);
    json row = {{"id", s.clip.id}, {"label", s.clip.label}, {"clip", clip_rel}, {"fps", s.clip.fps}};
    if (s.pose2d) {
      const std::string rel = "poses/" + s.clip.id + ".2d.jsonl";
      write_pose_file(dir / rel, *s.pose2d);
      row["pose2d"] = rel;
    }
    if (s.pose3d) {
      const std::string rel = "poses/" + s.clip.id + ".3d.jsonl";
      write_pose_file(dir / rel, *s.pose3d);
      row["pose3d"] = rel;
    }
    index << row.dump() << '\n';
  }
}

Dataset read_dataset(const std::filesystem::path& dir, bool load_poses) {
  std::ifstream meta_in(dir / "dataset.json");
  if (!meta_in) throw Error("no dataset.json in '" + dir.string() + "'");
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("dataset.json: ") + e.what());
  }
  if (meta.value("format", "") != kDatasetFormatTag) throw ParseError("dataset.json: unsupported format tag");
  Dataset ds;
  ds.num_classes = meta.at("num_classes").get<std::size_t>();

  std::ifstream index(dir / "index.jsonl");
  if (!index) throw Error("no index.jsonl in '" + dir.string() + "'");
  std::string line;
  long lineno = 0;
  while (std::getline(index, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("index.jsonl: ") + e.what(), lineno);
    }
    LabeledSample s;
    s.clip = read_clip(dir / row.at("clip").get<std::string>());
    if (s.clip.id != row.at("id").get<std::string>() || s.clip.label != row.at("label").get<std::size_t>())
      throw ValidationError("index.jsonl line " + std::to_string(lineno) + " disagrees with its clip file");
    if (load_poses) {
      if (row.contains("pose2d"))
        s.pose2d = std::get<Skeleton2DSequence>(load_pose_file(dir / row["pose2d"].get<std::string>(), 2));
      if (row.contains("pose3d"))
        s.pose3d = std::get<Skeleton3DSequence>(load_pose_file(dir / row["pose3d"].get<std::string>(), 3));
    }
    s.validate(ds.num_classes);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace pivit::data
