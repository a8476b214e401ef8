#include <gtest/gtest.h>

#include <cmath>
#include <future>

#include "carid/augment.hpp"
#include "carid/rng.hpp"

namespace {

using namespace carid;

const std::filesystem::path kConfigs = std::filesystem::path(CARID_SOURCE_DIR) / "configs";

cv::Mat random_rgb(int h, int w, std::uint64_t seed) {
  CounterRng rng(derive_key({seed, hash_label("img")}));
  cv::Mat m(h, w, CV_32FC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      m.at<cv::Vec3f>(y, x) = cv::Vec3f(static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                                        static_cast<float>(rng.uniform()));
  return m;
}

cv::Mat random_bgr8(int h, int w, std::uint64_t seed) {
  cv::Mat f = random_rgb(h, w, seed), out;
  f.convertTo(out, CV_8UC3, 255.0);
  return out;
}

AugmentationPolicy only(TransformSpec spec, int size = 16) {
  AugmentationPolicy p;
  p.transforms = {spec};
  p.output_height = p.output_width = size;
  return p;
}

TransformSpec gated(TransformKind kind, double gate) {
  TransformSpec s;
  s.kind = kind;
  s.gate_probability = gate;
  return s;
}

AugmentationPolicy full_policy(int size = 16) {
  auto p = build_policy(load_yaml_file(kConfigs / "augmentation/full.yaml"), {size, size, {}});
  return p;
}

double max_abs_diff(const cv::Mat& a, const cv::Mat& b) {
  return cv::norm(a, b, cv::NORM_INF);
}

// ---------------------------------------------------------------------------

TEST(BuildPolicy, EmptyTransformListKeepsResizeAndNormalize) {
  const auto p = build_policy(parse_yaml("transforms: []\n"), {32, 48, {}});
  EXPECT_TRUE(p.transforms.empty());
  EXPECT_EQ(p.output_height, 32);
  EXPECT_EQ(p.output_width, 48);
  EXPECT_EQ(p.normalization, Normalization{});
}

TEST(BuildPolicy, FullConfigHasSevenHalfGatedKindsInOrder) {
  const auto p = full_policy();
  ASSERT_EQ(p.transforms.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(to_string(p.transforms[i].kind), kTransformNames[i]);
    EXPECT_DOUBLE_EQ(p.transforms[i].gate_probability, 0.5);
  }
  const auto rec = build_policy(load_yaml_file(kConfigs / "augmentation/recommended.yaml"));
  ASSERT_EQ(rec.transforms.size(), 7u);
  EXPECT_EQ(rec.transforms[1].kind, TransformKind::vertical_flip);
  EXPECT_DOUBLE_EQ(rec.transforms[1].gate_probability, 0.0);
}

TEST(BuildPolicy, OrderFollowsConfigAndDefaultsFillGaps) {
  const auto p = build_policy(parse_yaml(
      "output_size: [20, 30]\nmean: [0.5, 0.5, 0.5]\nstd: [0.25, 0.5, 1]\n"
      "transforms:\n  - {kind: random_crop}\n  - {kind: rotation, max_degrees: 30}\n"
      "  - {kind: random_crop, scale: [0.5, 0.5], gate_probability: 1}\n"));
  ASSERT_EQ(p.transforms.size(), 3u);
  EXPECT_EQ(p.transforms[0].kind, TransformKind::random_crop);
  EXPECT_EQ(p.transforms[0].scale, (Range{0.6, 1.0}));
  EXPECT_DOUBLE_EQ(p.transforms[0].gate_probability, 0.5);
  EXPECT_DOUBLE_EQ(p.transforms[1].max_degrees, 30.0);
  EXPECT_EQ(p.transforms[2].scale, (Range{0.5, 0.5}));
  EXPECT_EQ(p.output_height, 20);
  EXPECT_EQ(p.output_width, 30);
  EXPECT_FLOAT_EQ(p.normalization.std[2], 1.0f);
}

TEST(BuildPolicy, RejectsBadInput) {
  auto code = [](const std::string& yaml) {
    try {
      build_policy(parse_yaml(yaml));
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::io_error;  // no throw
  };
  EXPECT_EQ(code("transforms: [{kind: solarize}]"), Errc::unknown_transform);
  EXPECT_EQ(code("transforms: [{kind: horizontal_flip, gate_probability: 1.3}]"), Errc::invalid_range);
  EXPECT_EQ(code("transforms: [{kind: horizontal_flip, gate_probability: -0.1}]"), Errc::invalid_range);
  EXPECT_EQ(code("transforms: [{kind: gaussian_blur, sigma: [2.0, 1.0]}]"), Errc::invalid_range);
  EXPECT_EQ(code("transforms: [{kind: gaussian_blur, sigma: [0.0, 1.0]}]"), Errc::invalid_range);
  EXPECT_EQ(code("transforms: [{kind: random_crop, scale: [0.5, 1.5]}]"), Errc::invalid_range);
  EXPECT_EQ(code("transforms: [{kind: color_jitter, brightness: -1}]"), Errc::invalid_range);
  EXPECT_EQ(code("transforms: [{kind: rotation, sigma: [1, 2]}]"), Errc::invalid_range);
  EXPECT_EQ(code("transforms: [{gate_probability: 0.5}]"), Errc::invalid_range);
  EXPECT_EQ(code("std: [0.2, 0, 0.2]"), Errc::invalid_range);
  EXPECT_EQ(code("output_size: [0, 10]"), Errc::invalid_range);
  EXPECT_EQ(code("transforms: [{kind: rotation, max_degrees: 15}]"), Errc::io_error);
}

// ---------------------------------------------------------------------------

TEST(Apply, FlipOnTwoByTwoSwapsColumns) {
  cv::Mat img(2, 2, CV_32FC3);
  img.at<cv::Vec3f>(0, 0) = {0.1f, 0.2f, 0.3f};
  img.at<cv::Vec3f>(0, 1) = {0.4f, 0.5f, 0.6f};
  img.at<cv::Vec3f>(1, 0) = {0.7f, 0.8f, 0.9f};
  img.at<cv::Vec3f>(1, 1) = {1.0f, 0.0f, 0.5f};
  auto p = only(gated(TransformKind::horizontal_flip, 1.0), 2);
  p.normalization = {{0, 0, 0}, {1, 1, 1}};
  const auto out = apply(p, img, 123);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) EXPECT_FLOAT_EQ(out.at(c, y, x), img.at<cv::Vec3f>(y, 1 - x)[c]);
}

TEST(Apply, ConstantImageNormalizedByItsValueIsZero) {
  cv::Mat img(10, 10, CV_32FC3, cv::Scalar(0.25, 0.5, 0.75));
  AugmentationPolicy p;
  p.output_height = p.output_width = 10;
  p.normalization = {{0.25f, 0.5f, 0.75f}, {1, 1, 1}};
  for (float v : eval_transform(p, img).data) ASSERT_EQ(v, 0.0f);
  // Area resampling may round in the last bit.
  p.output_height = p.output_width = 7;
  for (float v : eval_transform(p, img).data) ASSERT_NEAR(v, 0.0f, 1e-6);
}

TEST(Apply, AllGatesZeroEqualsEvalTransformBitwise) {
  auto p = full_policy(24);
  for (auto& t : p.transforms) t.gate_probability = 0.0;
  const auto img = random_bgr8(40, 30, 5);
  const auto expected = eval_transform(p, img);
  for (std::uint64_t seed = 0; seed < 200; ++seed) ASSERT_EQ(apply(p, img, seed), expected) << seed;
}

TEST(Apply, ShapeDeterminismAndSeedSensitivity) {
  const auto p = full_policy(20);
  const auto img = random_bgr8(33, 27, 9);
  int differing = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto a = apply(p, img, seed);
    EXPECT_EQ(a.channels, 3);
    EXPECT_EQ(a.height, 20);
    EXPECT_EQ(a.width, 20);
    EXPECT_EQ(a.data.size(), 3u * 20 * 20);
    EXPECT_EQ(a, apply(p, img, seed));
    differing += a != apply(p, img, seed + 1000);
  }
  EXPECT_GE(differing, 25);
  EXPECT_EQ(eval_transform(p, img), eval_transform(p, img));
}

TEST(Apply, GateRatesOverTenThousandSeeds) {
  const auto p = full_policy(4);
  const auto img = random_bgr8(8, 8, 1);
  std::vector<int> fired(p.transforms.size(), 0);
  constexpr int kSeeds = 10000;
  for (int seed = 0; seed < kSeeds; ++seed) {
    ApplyTrace trace;
    apply(p, img, static_cast<std::uint64_t>(seed), &trace);
    for (std::size_t i = 0; i < fired.size(); ++i) fired[i] += trace.fired[i];
  }
  for (std::size_t i = 0; i < fired.size(); ++i) {
    const double rate = fired[i] / static_cast<double>(kSeeds);
    EXPECT_GE(rate, 0.48) << kTransformNames[i];
    EXPECT_LE(rate, 0.52) << kTransformNames[i];
  }
}

TEST(Apply, AppendingATransformLeavesEarlierGatesAlone) {
  auto p = full_policy(4);
  auto longer = p;
  longer.transforms.push_back(gated(TransformKind::greyscale, 0.5));
  const auto img = random_bgr8(8, 8, 2);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    ApplyTrace a, b;
    apply(p, img, seed, &a);
    apply(longer, img, seed, &b);
    b.fired.pop_back();
    ASSERT_EQ(a.fired, b.fired);
  }
}

TEST(Apply, ReversingRotationAndCropChangesOutput) {
  AugmentationPolicy p;
  p.output_height = p.output_width = 16;
  auto rot = gated(TransformKind::rotation, 1.0);
  rot.max_degrees = 40;
  auto crop = gated(TransformKind::random_crop, 1.0);
  crop.scale = {0.3, 0.5};
  const auto img = random_bgr8(32, 32, 4);
  int differing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    p.transforms = {rot, crop};
    const auto a = apply(p, img, seed);
    p.transforms = {crop, rot};
    differing += a != apply(p, img, seed);
  }
  EXPECT_EQ(differing, 10);
}

TEST(Apply, TooSmallInputThrows) {
  auto p = full_policy();
  p.min_input_side = 10;
  try {
    apply(p, random_bgr8(9, 20, 1), 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::image_too_small);
  }
  EXPECT_THROW(eval_transform(p, cv::Mat()), Error);
  EXPECT_NO_THROW(apply(p, random_bgr8(10, 10, 1), 0));
}

TEST(Apply, ConcurrentCallsMatchSerial) {
  const auto p = full_policy(16);
  const auto img = random_bgr8(30, 30, 6);
  std::vector<ImageTensor> serial;
  for (std::uint64_t s = 0; s < 32; ++s) serial.push_back(apply(p, img, s));
  std::vector<std::future<ImageTensor>> futures;
  for (std::uint64_t s = 0; s < 32; ++s) futures.push_back(std::async(std::launch::async, [&, s] { return apply(p, img, s); }));
  for (std::size_t s = 0; s < 32; ++s) EXPECT_EQ(futures[s].get(), serial[s]);
}

// ---------------------------------------------------------------------------

TEST(Transforms, FlipsGreyscaleAndCrop) {
  const auto img = random_rgb(3, 5, 1);
  const auto h = transforms::flip_horizontal(img);
  const auto v = transforms::flip_vertical(img);
  const auto g = transforms::greyscale(img);
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 5; ++x) {
      EXPECT_EQ(h.at<cv::Vec3f>(y, x), img.at<cv::Vec3f>(y, 4 - x));
      EXPECT_EQ(v.at<cv::Vec3f>(y, x), img.at<cv::Vec3f>(2 - y, x));
      const auto p = img.at<cv::Vec3f>(y, x);
      const float l = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(g.at<cv::Vec3f>(y, x)[c], l, 1e-7);
    }
  }
  EXPECT_EQ(g.channels(), 3);
  const auto c = transforms::crop(img, cv::Rect(1, 1, 3, 2));
  EXPECT_EQ(c.size(), cv::Size(3, 2));
  EXPECT_EQ(c.at<cv::Vec3f>(0, 0), img.at<cv::Vec3f>(1, 1));
}

TEST(Transforms, RotationIdentitiesAndBlurOfConstant) {
  const auto img = random_rgb(9, 9, 2);
  EXPECT_LT(max_abs_diff(transforms::rotate(img, 0.0), img), 1e-6);
  cv::Mat both;
  cv::flip(img, both, -1);
  EXPECT_LT(max_abs_diff(transforms::rotate(img, 180.0), both), 1e-4);
  cv::Mat flat(12, 12, CV_32FC3, cv::Scalar(0.3, 0.6, 0.9));
  EXPECT_LT(max_abs_diff(transforms::gaussian_blur(flat, 1.7), flat), 1e-6);
  // Blur keeps the mean and lowers the variance of noise.
  const auto noisy = random_rgb(32, 32, 3);
  const auto blurred = transforms::gaussian_blur(noisy, 1.5);
  cv::Scalar m0, s0, m1, s1;
  cv::meanStdDev(noisy, m0, s0);
  cv::meanStdDev(blurred, m1, s1);
  EXPECT_NEAR(m0[0], m1[0], 0.01);
  EXPECT_LT(s1[0], s0[0] / 2);
}

TEST(Transforms, ColourAdjustmentEdgeCases) {
  const auto img = random_rgb(6, 6, 4);
  EXPECT_LT(max_abs_diff(transforms::adjust_color(img, 1.0, 1.0, 1.0), img), 1e-6);
  EXPECT_EQ(cv::countNonZero(transforms::adjust_color(img, 0.0, 1.0, 1.0).reshape(1)), 0);
  EXPECT_LT(max_abs_diff(transforms::adjust_color(img, 1.0, 1.0, 0.0), transforms::greyscale(img)), 1e-6);
  const auto flat = transforms::adjust_color(img, 1.0, 0.0, 1.0);
  double lo, hi;
  cv::minMaxLoc(transforms::greyscale(flat).reshape(1), &lo, &hi);
  EXPECT_LT(hi - lo, 1e-5);
  const auto bright = transforms::adjust_color(img, 1.4, 1.4, 1.4);
  cv::minMaxLoc(bright.reshape(1), &lo, &hi);
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
}

TEST(Normalization, DenormalizeInvertsNormalize) {
  const Normalization n{{0.485f, 0.456f, 0.406f}, {0.229f, 0.224f, 0.225f}};
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto img = random_rgb(17, 13, s);
    EXPECT_LT(max_abs_diff(denormalize(normalize(img, n), n), img), 1e-6);
  }
}

TEST(Normalization, MatchedStatisticsGiveNearZeroMean) {
  // Smooth "natural" image: gradients with a few blobs.
  cv::Mat img(256, 256, CV_32FC3);
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x)
      img.at<cv::Vec3f>(y, x) = cv::Vec3f(0.5f + 0.4f * std::sin(x / 23.0f), 0.3f + 0.2f * std::cos(y / 17.0f),
                                          static_cast<float>(x + y) / 600.0f);
  cv::Scalar mean, stddev;
  cv::meanStdDev(img, mean, stddev);
  AugmentationPolicy p;
  p.output_height = p.output_width = 96;
  for (int c = 0; c < 3; ++c) {
    p.normalization.mean[c] = static_cast<float>(mean[c]);
    p.normalization.std[c] = static_cast<float>(stddev[c]);
  }
  const auto t = eval_transform(p, img);
  for (int c = 0; c < 3; ++c) {
    double sum = 0;
    for (int y = 0; y < t.height; ++y)
      for (int x = 0; x < t.width; ++x) sum += t.at(c, y, x);
    EXPECT_LT(std::abs(sum / (t.height * t.width)), 0.05) << c;
  }
}

TEST(Conversion, BgrBytesBecomeRgbUnitFloats) {
  cv::Mat bgr(1, 1, CV_8UC3, cv::Scalar(255, 0, 51));
  const auto rgb = to_rgb_float(bgr);
  EXPECT_FLOAT_EQ(rgb.at<cv::Vec3f>(0, 0)[0], 0.2f);
  EXPECT_FLOAT_EQ(rgb.at<cv::Vec3f>(0, 0)[1], 0.0f);
  EXPECT_FLOAT_EQ(rgb.at<cv::Vec3f>(0, 0)[2], 1.0f);
  cv::Mat grey(2, 2, CV_8UC1, cv::Scalar(255));
  EXPECT_EQ(to_rgb_float(grey).type(), CV_32FC3);
}

}  // namespace
