#include "carid/augment.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgproc.hpp>

#include "carid/rng.hpp"

namespace carid {

std::string_view to_string(TransformKind kind) noexcept {
  return kTransformNames[static_cast<std::size_t>(kind)];
}

std::optional<TransformKind> parse_transform_kind(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kTransformNames.size(); ++i) {
    if (kTransformNames[i] == name) return static_cast<TransformKind>(i);
  }
  return std::nullopt;
}

namespace {

[[noreturn]] void invalid_range(const std::string& field, const std::string& why) {
  throw Error(Errc::invalid_range, field + ": " + why);
}

double number_at(const ConfigNode& node, const std::string& field) {
  if (!node.is_number()) invalid_range(field, "expected a number, found " + std::string(node.type_name()));
  return node.as_double();
}

Range range_at(const ConfigNode& node, const std::string& field) {
  if (!node.is_list() || node.as_list().size() != 2) invalid_range(field, "expected [min, max]");
  Range r{number_at(node.as_list()[0], field), number_at(node.as_list()[1], field)};
  if (!(r.min <= r.max)) invalid_range(field, "min must not exceed max");
  return r;
}

std::array<float, 3> triple_at(const ConfigNode& node, const std::string& field) {
  if (!node.is_list() || node.as_list().size() != 3) invalid_range(field, "expected 3 numbers");
  std::array<float, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) out[i] = static_cast<float>(number_at(node.as_list()[i], field));
  return out;
}

TransformSpec parse_transform(const ConfigNode& item, const std::string& where) {
  if (!item.is_map()) invalid_range(where, "transform entries must be maps");
  const ConfigNode* kind_node = item.find("kind");
  if (!kind_node || !kind_node->is_string()) invalid_range(where + ".kind", "missing transform kind");
  const auto kind = parse_transform_kind(kind_node->as_string());
  if (!kind) throw Error(Errc::unknown_transform, kind_node->as_string());

  TransformSpec spec;
  spec.kind = *kind;
  for (const auto& [key, value] : item.as_map()) {
    const std::string field = where + "." + key;
    if (key == "kind") continue;
    if (key == "gate_probability") {
      spec.gate_probability = number_at(value, field);
      if (!(spec.gate_probability >= 0.0 && spec.gate_probability <= 1.0)) {
        invalid_range(field, "must lie in [0, 1]");
      }
    } else if (key == "max_degrees" && spec.kind == TransformKind::rotation) {
      spec.max_degrees = number_at(value, field);
      if (!(spec.max_degrees >= 0.0 && spec.max_degrees <= 180.0)) invalid_range(field, "must lie in [0, 180]");
    } else if (key == "sigma" && spec.kind == TransformKind::gaussian_blur) {
      spec.sigma = range_at(value, field);
      if (!(spec.sigma.min > 0.0)) invalid_range(field, "sigma must be positive");
    } else if (key == "scale" && spec.kind == TransformKind::random_crop) {
      spec.scale = range_at(value, field);
      if (!(spec.scale.min > 0.0 && spec.scale.max <= 1.0)) invalid_range(field, "scale must lie in (0, 1]");
    } else if ((key == "brightness" || key == "contrast" || key == "saturation") &&
               spec.kind == TransformKind::color_jitter) {
      const double delta = number_at(value, field);
      if (!(delta >= 0.0 && delta <= 1.0)) invalid_range(field, "jitter delta must lie in [0, 1]");
      (key == "brightness" ? spec.brightness : key == "contrast" ? spec.contrast : spec.saturation) = delta;
    } else {
      invalid_range(field, "not a parameter of " + std::string(to_string(spec.kind)));
    }
  }
  return spec;
}

cv::Mat apply_one(const TransformSpec& spec, const cv::Mat& rgb, CounterRng& rng) {
  switch (spec.kind) {
    case TransformKind::horizontal_flip:
      return transforms::flip_horizontal(rgb);
    case TransformKind::vertical_flip:
      return transforms::flip_vertical(rgb);
    case TransformKind::rotation:
      return transforms::rotate(rgb, rng.uniform(-spec.max_degrees, spec.max_degrees));
    case TransformKind::greyscale:
      return transforms::greyscale(rgb);
    case TransformKind::gaussian_blur:
      return transforms::gaussian_blur(rgb, rng.uniform(spec.sigma.min, spec.sigma.max));
    case TransformKind::random_crop: {
      const double area = rng.uniform(spec.scale.min, spec.scale.max);
      const double side = std::sqrt(area);
      const int w = std::clamp(static_cast<int>(std::lround(rgb.cols * side)), 1, rgb.cols);
      const int h = std::clamp(static_cast<int>(std::lround(rgb.rows * side)), 1, rgb.rows);
      const int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(rgb.cols - w + 1)));
      const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(rgb.rows - h + 1)));
      return transforms::crop(rgb, cv::Rect(x, y, w, h));
    }
    case TransformKind::color_jitter: {
      const double b = rng.uniform(1.0 - spec.brightness, 1.0 + spec.brightness);
      const double c = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast);
      const double s = rng.uniform(1.0 - spec.saturation, 1.0 + spec.saturation);
      return transforms::adjust_color(rgb, b, c, s);
    }
  }
  return rgb;
}

void check_input(const AugmentationPolicy& policy, const cv::Mat& image) {
  if (image.empty() || image.rows < policy.min_input_side || image.cols < policy.min_input_side) {
    throw Error(Errc::image_too_small, std::to_string(image.cols) + "x" + std::to_string(image.rows) +
                                           " is below the minimum side of " +
                                           std::to_string(policy.min_input_side));
  }
}

ImageTensor finish(const AugmentationPolicy& policy, const cv::Mat& rgb) {
  return normalize(transforms::resize(rgb, policy.output_height, policy.output_width),
                   policy.normalization);
}

}  // namespace

std::optional<std::string> check_transform_item(const ConfigNode& item) {
  try {
    parse_transform(item, "transform");
  } catch (const Error& e) {
    return std::string(e.what());
  }
  return std::nullopt;
}

AugmentationPolicy build_policy(const ConfigNode& section, const PolicyDefaults& defaults) {
  AugmentationPolicy policy;
  policy.output_height = defaults.output_height;
  policy.output_width = defaults.output_width;
  policy.normalization = defaults.normalization;
  if (section.is_null()) return policy;
  if (!section.is_map()) invalid_range("augmentation", "expected a map");

  if (const auto* size = section.find("output_size"); size && !size->is_null()) {
    if (!size->is_list() || size->as_list().size() != 2 || !size->as_list()[0].is_int() ||
        !size->as_list()[1].is_int()) {
      invalid_range("output_size", "expected [height, width] integers");
    }
    policy.output_height = static_cast<int>(size->as_list()[0].as_int());
    policy.output_width = static_cast<int>(size->as_list()[1].as_int());
  }
  if (policy.output_height <= 0 || policy.output_width <= 0) {
    invalid_range("output_size", "must be positive");
  }
  if (const auto* mean = section.find("mean"); mean && !mean->is_null()) {
    policy.normalization.mean = triple_at(*mean, "mean");
  }
  if (const auto* std_dev = section.find("std"); std_dev && !std_dev->is_null()) {
    policy.normalization.std = triple_at(*std_dev, "std");
  }
  for (float s : policy.normalization.std) {
    if (!(s > 0.0f)) invalid_range("std", "components must be strictly positive");
  }
  if (const auto* side = section.find("min_input_side"); side && !side->is_null()) {
    if (!side->is_int() || side->as_int() < 1) invalid_range("min_input_side", "must be an integer >= 1");
    policy.min_input_side = static_cast<int>(side->as_int());
  }
  if (const auto* list = section.find("transforms"); list && !list->is_null()) {
    if (!list->is_list()) invalid_range("transforms", "expected a list");
    const auto& items = list->as_list();
    for (std::size_t i = 0; i < items.size(); ++i) {
      policy.transforms.push_back(parse_transform(items[i], "transforms[" + std::to_string(i) + "]"));
    }
  }
  return policy;
}

ImageTensor apply(const AugmentationPolicy& policy, const cv::Mat& image, std::uint64_t seed,
                  ApplyTrace* trace) {
  check_input(policy, image);
  cv::Mat rgb = to_rgb_float(image);
  if (trace) trace->fired.assign(policy.transforms.size(), false);
  for (std::size_t i = 0; i < policy.transforms.size(); ++i) {
    const auto& spec = policy.transforms[i];
    CounterRng rng(derive_key({seed, hash_label("augment"), static_cast<std::uint64_t>(i)}));
    if (!rng.bernoulli(spec.gate_probability)) continue;
    rgb = apply_one(spec, rgb, rng);
    if (trace) trace->fired[i] = true;
  }
  return finish(policy, rgb);
}

ImageTensor eval_transform(const AugmentationPolicy& policy, const cv::Mat& image) {
  check_input(policy, image);
  return finish(policy, to_rgb_float(image));
}

cv::Mat to_rgb_float(const cv::Mat& image) {
  cv::Mat rgb;
  if (image.depth() == CV_32F) {
    if (image.channels() == 3) return image.clone();
    if (image.channels() == 1) {
      cv::cvtColor(image, rgb, cv::COLOR_GRAY2RGB);
      return rgb;
    }
  }
  cv::Mat bgr;
  switch (image.channels()) {
    case 1: cv::cvtColor(image, bgr, cv::COLOR_GRAY2BGR); break;
    case 4: cv::cvtColor(image, bgr, cv::COLOR_BGRA2BGR); break;
    case 3: bgr = image; break;
    default: throw Error(Errc::undecodable_image, "unsupported channel count");
  }
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat out;
  const double scale = image.depth() == CV_16U ? 1.0 / 65535.0 : image.depth() == CV_8U ? 1.0 / 255.0 : 1.0;
  rgb.convertTo(out, CV_32FC3, scale);
  return out;
}

ImageTensor normalize(const cv::Mat& rgb, const Normalization& normalization) {
  CV_Assert(rgb.type() == CV_32FC3);
  ImageTensor out;
  out.height = rgb.rows;
  out.width = rgb.cols;
  out.data.resize(static_cast<std::size_t>(3) * rgb.rows * rgb.cols);
  const std::size_t plane = static_cast<std::size_t>(rgb.rows) * rgb.cols;
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<cv::Vec3f>(y);
    for (int x = 0; x < rgb.cols; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * rgb.cols + x;
      for (int c = 0; c < 3; ++c) {
        out.data[c * plane + idx] = (row[x][c] - normalization.mean[c]) / normalization.std[c];
      }
    }
  }
  return out;
}

cv::Mat denormalize(const ImageTensor& tensor, const Normalization& normalization) {
  cv::Mat rgb(tensor.height, tensor.width, CV_32FC3);
  for (int y = 0; y < tensor.height; ++y) {
    auto* row = rgb.ptr<cv::Vec3f>(y);
    for (int x = 0; x < tensor.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        row[x][c] = tensor.at(c, y, x) * normalization.std[c] + normalization.mean[c];
      }
    }
  }
  return rgb;
}

namespace transforms {

cv::Mat flip_horizontal(const cv::Mat& rgb) {
  cv::Mat out;
  cv::flip(rgb, out, 1);
  return out;
}

cv::Mat flip_vertical(const cv::Mat& rgb) {
  cv::Mat out;
  cv::flip(rgb, out, 0);
  return out;
}

cv::Mat rotate(const cv::Mat& rgb, double degrees) {
  const cv::Point2f center((rgb.cols - 1) / 2.0f, (rgb.rows - 1) / 2.0f);
  const cv::Mat m = cv::getRotationMatrix2D(center, degrees, 1.0);
  cv::Mat out;
  cv::warpAffine(rgb, out, m, rgb.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar::all(0));
  return out;
}

cv::Mat greyscale(const cv::Mat& rgb) {
  cv::Mat out(rgb.size(), CV_32FC3);
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* src = rgb.ptr<cv::Vec3f>(y);
    auto* dst = out.ptr<cv::Vec3f>(y);
    for (int x = 0; x < rgb.cols; ++x) {
      const float l = 0.299f * src[x][0] + 0.587f * src[x][1] + 0.114f * src[x][2];
      dst[x] = cv::Vec3f(l, l, l);
    }
  }
  return out;
}

cv::Mat gaussian_blur(const cv::Mat& rgb, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  cv::Mat out;
  cv::GaussianBlur(rgb, out, cv::Size(2 * radius + 1, 2 * radius + 1), sigma, sigma,
                   cv::BORDER_REFLECT_101);
  return out;
}

cv::Mat crop(const cv::Mat& rgb, const cv::Rect& region) { return rgb(region).clone(); }

cv::Mat adjust_color(const cv::Mat& rgb, double brightness, double contrast, double saturation) {
  cv::Mat out = rgb * std::max(0.0, brightness);
  cv::min(out, 1.0, out);

  const cv::Mat grey = greyscale(out);
  const float mean_level = static_cast<float>(cv::mean(grey)[0]);
  out = (out - cv::Scalar::all(mean_level)) * contrast + cv::Scalar::all(mean_level);
  cv::max(out, 0.0, out);
  cv::min(out, 1.0, out);

  const cv::Mat grey2 = greyscale(out);
  out = (out - grey2) * saturation + grey2;
  cv::max(out, 0.0, out);
  cv::min(out, 1.0, out);
  return out;
}

cv::Mat resize(const cv::Mat& rgb, int height, int width) {
  if (rgb.rows == height && rgb.cols == width) return rgb.clone();
  const int interpolation = (height <= rgb.rows && width <= rgb.cols) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::Mat out;
  cv::resize(rgb, out, cv::Size(width, height), 0, 0, interpolation);
  return out;
}

}  // namespace transforms
}  // namespace carid
