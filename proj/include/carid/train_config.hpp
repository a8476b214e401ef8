#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "carid/augment.hpp"
#include "carid/backbone_registry.hpp"
#include "carid/config.hpp"
#include "carid/dataset.hpp"

namespace carid {

enum class OptimizerKind { adam, sgd };

std::string_view to_string(OptimizerKind kind) noexcept;

/// The typed view of a resolved configuration that the training loop needs.
struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double momentum = 0.9;
  int batch_size = 32;
  int epochs = 100;
  int patience = 5;
  double factor = 0.1;
  double threshold = 1e-4;
  double dropout_rate = 0.5;
  std::uint64_t seed = 0;
  int threads = 1;
  int num_workers = 1;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Reads a resolved node; the node is expected to have passed validate().
TrainConfig train_config_from(const ConfigNode& resolved);

BackboneSpec backbone_spec_from(const ConfigNode& resolved);

/// The augmentation policy with null output size / normalization taken from
/// the selected backbone.
AugmentationPolicy policy_from(const ConfigNode& resolved);

SplitRatios split_ratios_from(const ConfigNode& resolved);

}  // namespace carid
