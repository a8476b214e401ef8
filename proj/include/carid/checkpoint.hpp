#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "carid/augment.hpp"
#include "carid/model.hpp"
#include "json.hpp"

namespace carid {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  BackboneSpec spec;
  int num_classes = 0;
  double dropout_rate = 0.0;
  std::vector<std::string> class_names;
  Normalization normalization;
  int output_height = 0;
  int output_width = 0;
  /// The resolved run configuration, as YAML.
  std::string config_yaml;
  nlohmann::json metrics = nlohmann::json::object();
  int epoch = 0;

  /// Resize + normalize policy with no stochastic transforms.
  AugmentationPolicy eval_policy() const;
};

nlohmann::json to_json(const CheckpointMeta& meta);
CheckpointMeta meta_from_json(const nlohmann::json& j);

struct Checkpoint {
  Model model{nullptr};
  CheckpointMeta meta;
  /// "<backbone>-<crc32 of the weight bytes>"; identical weights give identical versions.
  std::string model_version;
};

// Layout: "CARIDCKP", u32 version, u64 meta length, meta JSON, u64 weights
// length, weights archive, u32 crc32 of everything before it. Little-endian.
// Written to a temporary file and renamed into place.
void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path);

/// Rebuilds the model (no pretrained download) in eval mode.
/// Throws CorruptCheckpoint, VersionMismatch, IoError.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Fills spec / class / policy fields from a model and its policy.
CheckpointMeta make_meta(const Model& model, const std::vector<std::string>& class_names,
                         const AugmentationPolicy& policy);

}  // namespace carid
