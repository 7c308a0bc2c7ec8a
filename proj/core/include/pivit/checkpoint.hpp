#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "pivit/layers.hpp"

namespace pivit::ckpt {

inline constexpr const char* kFormatTag = "pivit-ckpt/1";

struct Entry {
  std::string name;
  Tensor value;
  bool train_only = false;
};

/// Flat name -> tensor map plus a free-form config record.
///
/// On disk: 8-byte magic, u64 header length, a JSON header
/// {"format", "kind", "config", "tensors": [{"name","shape","train_only"}]},
/// then every tensor's f64 payload in header order.
struct Checkpoint {
  std::string kind;
  nlohmann::json config;
  std::vector<Entry> entries;

  const Entry* find(const std::string& name) const;
  bool has_train_only() const;
  /// Copies every parameter of `dst` from the entry with the same name.
  void apply_to(nn::ParamList& dst) const;
};

Checkpoint from_params(std::string kind, nlohmann::json config, const nn::ParamList& params,
                       bool include_train_only = true);
void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

/// Order-sensitive FNV-1a over parameter names, shapes and values.
std::uint64_t weight_hash(const nn::ParamList& params);

}  // namespace pivit::ckpt
