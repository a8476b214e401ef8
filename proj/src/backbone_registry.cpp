#include "carid/backbone_registry.hpp"

namespace carid {

namespace {

const Normalization kImageNet{};
const Normalization kUnit{{0.0f, 0.0f, 0.0f}, {1.0f, 1.0f, 1.0f}};

const std::vector<BackboneInfo>& registry() {
  static const std::vector<BackboneInfo> entries = {
      {"resnet50", "torchvision resnet50", 2048, 224, 224, kImageNet, {"layer4"}},
      {"densenet161",
       "torchvision densenet161",
       2208,
       224,
       224,
       kImageNet,
       {"features.denseblock4", "features.norm5"}},
      {"efficientnetv2_b2",
       "timm tf_efficientnetv2_b2",
       1408,
       288,
       288,
       kImageNet,
       {"blocks.5", "conv_head", "bn2"}},
      {"mobilevit_s", "timm mobilevit_s", 640, 256, 256, kUnit, {"stages.4", "final_conv"}},
      {"swin_s3_tiny", "timm swin_s3_tiny_224", 768, 224, 224, kImageNet, {"layers.3", "norm"}},
      {"coat_lite_mini",
       "timm coat_lite_mini",
       512,
       224,
       224,
       kImageNet,
       {"serial_blocks4", "patch_embed4", "cpe4", "crpe4", "norm4", "cls_token4"}},
  };
  return entries;
}

}  // namespace

std::span<const BackboneInfo> backbone_registry() { return registry(); }

const BackboneInfo& find_backbone(std::string_view name) {
  for (const auto& info : registry()) {
    if (info.name == name) return info;
  }
  throw Error(Errc::unknown_backbone, std::string(name));
}

BackboneSpec make_spec(std::string_view name, bool pretrained, bool unfreeze_last_block) {
  const auto& info = find_backbone(name);
  return BackboneSpec{std::string(info.name), pretrained, unfreeze_last_block, info.feature_dim,
                      info.input_height, info.input_width};
}

}  // namespace carid
