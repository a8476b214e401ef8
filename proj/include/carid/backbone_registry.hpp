#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carid/augment.hpp"

namespace carid {

/// Static description of a registered backbone.
struct BackboneInfo {
  std::string_view name;
  std::string_view upstream;  // architecture whose parameter names we mirror
  int feature_dim = 0;
  int input_height = 224;
  int input_width = 224;
  Normalization normalization;
  /// Parameter-name prefixes (below "backbone.") that form the last block.
  std::vector<std::string> last_block;
};

std::span<const BackboneInfo> backbone_registry();

/// Throws UnknownBackbone.
const BackboneInfo& find_backbone(std::string_view name);

struct BackboneSpec {
  std::string name;
  bool pretrained = true;
  bool unfreeze_last_block = true;
  int feature_dim = 0;
  /// Input resolution the model accepts; defaults to the registry's native size.
  int input_height = 0;
  int input_width = 0;

  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

/// Fills feature_dim and native input size from the registry.
BackboneSpec make_spec(std::string_view name, bool pretrained = true, bool unfreeze_last_block = true);

}  // namespace carid
