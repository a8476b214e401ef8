#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "carid/config.hpp"
#include "carid/error.hpp"

namespace carid {

enum class TransformKind {
  horizontal_flip,
  vertical_flip,
  rotation,
  greyscale,
  gaussian_blur,
  random_crop,
  color_jitter,
};

inline constexpr std::array<std::string_view, 7> kTransformNames = {
    "horizontal_flip", "vertical_flip", "rotation",     "greyscale",
    "gaussian_blur",   "random_crop",   "color_jitter",
};

std::string_view to_string(TransformKind kind) noexcept;
std::optional<TransformKind> parse_transform_kind(std::string_view name) noexcept;

struct Range {
  double min = 0.0;
  double max = 0.0;
  friend bool operator==(const Range&, const Range&) = default;
};

/// One gated transform. Only the parameters of its own kind are read.
struct TransformSpec {
  TransformKind kind = TransformKind::horizontal_flip;
  double gate_probability = 0.5;
  double max_degrees = 15.0;         // rotation: angle ~ U(-max, +max)
  Range sigma{0.1, 2.0};             // gaussian_blur
  Range scale{0.6, 1.0};             // random_crop: kept area fraction
  double brightness = 0.4;           // color_jitter: factor ~ U(1-b, 1+b)
  double contrast = 0.4;
  double saturation = 0.4;

  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

struct Normalization {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct AugmentationPolicy {
  std::vector<TransformSpec> transforms;
  int output_height = 288;
  int output_width = 288;
  Normalization normalization;
  /// Inputs narrower or shorter than this raise ImageTooSmall.
  int min_input_side = 1;

  friend bool operator==(const AugmentationPolicy&, const AugmentationPolicy&) = default;
};

/// Fallbacks used where the config leaves output size or normalization null;
/// callers take these from the selected backbone.
struct PolicyDefaults {
  int output_height = 288;
  int output_width = 288;
  Normalization normalization;
};

/// Planar float image, channel-major (C, H, W), RGB order.
struct ImageTensor {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

/// Builds a policy from the `augmentation:` config section. Transform order
/// follows the config list exactly; unspecified parameters take the
/// TransformSpec defaults. Throws UnknownTransform, InvalidRange.
AugmentationPolicy build_policy(const ConfigNode& section, const PolicyDefaults& defaults = {});

/// Validates one `transforms:` list item; returns the problem or nullopt.
std::optional<std::string> check_transform_item(const ConfigNode& item);

/// Which gated transforms fired during one apply() call, in policy order.
struct ApplyTrace {
  std::vector<bool> fired;
};

/// Stochastic training path. Transform i draws its gate and its parameters
/// from an independent counter stream keyed by (seed, i); resize and
/// normalization always run last. Pure in (policy, image, seed).
/// `image` is 8-bit BGR (as decoded) or float RGB in [0, 1].
ImageTensor apply(const AugmentationPolicy& policy, const cv::Mat& image, std::uint64_t seed,
                  ApplyTrace* trace = nullptr);

/// Deterministic evaluation path: resize + normalize only.
ImageTensor eval_transform(const AugmentationPolicy& policy, const cv::Mat& image);

/// Inverse of the normalization step; returns float RGB in (H, W, 3) layout.
cv::Mat denormalize(const ImageTensor& tensor, const Normalization& normalization);

/// Normalizes an RGB float image (values in [0, 1]) without resizing.
ImageTensor normalize(const cv::Mat& rgb_float, const Normalization& normalization);

/// Converts a decoded BGR 8-bit image (or an RGB float image) to RGB float.
cv::Mat to_rgb_float(const cv::Mat& image);

namespace transforms {
// Individual transforms on RGB float images in [0, 1]. Exposed for tests.
cv::Mat flip_horizontal(const cv::Mat& rgb);
cv::Mat flip_vertical(const cv::Mat& rgb);
cv::Mat rotate(const cv::Mat& rgb, double degrees);
cv::Mat greyscale(const cv::Mat& rgb);
cv::Mat gaussian_blur(const cv::Mat& rgb, double sigma);
cv::Mat crop(const cv::Mat& rgb, const cv::Rect& region);
cv::Mat adjust_color(const cv::Mat& rgb, double brightness, double contrast, double saturation);
cv::Mat resize(const cv::Mat& rgb, int height, int width);
}  // namespace transforms

}  // namespace carid
