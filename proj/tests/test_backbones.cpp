#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "carid/error.hpp"
#include "carid/model.hpp"

namespace {

namespace fs = std::filesystem;

fs::path reference_dir() {
  const char* env = std::getenv("CARID_REFERENCE_DIR");
  return env ? fs::path(env) : fs::path();
}

std::map<std::string, torch::Tensor> load_dict(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::map<std::string, torch::Tensor> out;
  for (const auto& e : torch::pickle_load(bytes).toGenericDict()) out[e.key().toStringRef()] = e.value().toTensor();
  return out;
}

class Backbone : public ::testing::TestWithParam<std::string> {};

TEST_P(Backbone, FeatureDimAndNativeShape) {
  const auto& info = carid::find_backbone(GetParam());
  auto spec = carid::make_spec(GetParam(), false, true);
  auto model = carid::build_model(spec, 3, 0.0);
  auto x = torch::randn({1, 3, info.input_height, info.input_width});
  torch::NoGradGuard g;
  auto f = model->features(x);
  EXPECT_EQ(f.sizes(), (std::vector<int64_t>{1, info.feature_dim}));
  auto logits = model->forward(x);
  EXPECT_EQ(logits.sizes(), (std::vector<int64_t>{1, 3}));
}

TEST_P(Backbone, WrongInputShapeThrows) {
  auto model = carid::build_model(carid::make_spec(GetParam(), false, true), 3, 0.0);
  try {
    model->forward(torch::zeros({1, 3, 32, 32}));
    FAIL() << "expected ShapeMismatch";
  } catch (const carid::Error& e) {
    EXPECT_EQ(e.code(), carid::Errc::shape_mismatch);
  }
}

// Loads upstream weights strictly by name and compares pooled features with
// the upstream implementation on the same input.
TEST_P(Backbone, MatchesUpstreamFeatures) {
  const auto dir = reference_dir();
  if (dir.empty() || !fs::exists(dir / (GetParam() + ".ref.pth"))) GTEST_SKIP() << "no reference export";
  carid::ModelOptions opts;
  opts.weights_dir = dir;
  auto model = carid::build_model(carid::make_spec(GetParam(), true, true), 3, 0.0, opts);
  auto ref = load_dict(dir / (GetParam() + ".ref.pth"));
  torch::NoGradGuard g;
  model->eval();
  auto f = model->features(ref.at("input"));
  const auto& expected = ref.at("features");
  ASSERT_EQ(f.sizes(), expected.sizes());
  const double err = (f - expected).abs().max().item<double>();
  const double scale = expected.abs().max().item<double>();
  EXPECT_LE(err, 1e-4 * std::max(1.0, scale)) << "max abs err " << err << " scale " << scale;
}

INSTANTIATE_TEST_SUITE_P(All, Backbone,
                         ::testing::Values("resnet50", "densenet161", "efficientnetv2_b2", "mobilevit_s",
                                           "swin_s3_tiny", "coat_lite_mini"));

TEST(BackboneRegistry, UnknownNameThrows) {
  try {
    carid::make_spec("vgg16", false, false);
    FAIL();
  } catch (const carid::Error& e) {
    EXPECT_EQ(e.code(), carid::Errc::unknown_backbone);
  }
}

TEST(BackboneWeights, MissingFileThrows) {
  carid::ModelOptions opts;
  opts.weights_dir = "/nonexistent";
  try {
    carid::build_model(carid::make_spec("resnet50", true, false), 3, 0.0, opts);
    FAIL();
  } catch (const carid::Error& e) {
    EXPECT_EQ(e.code(), carid::Errc::pretrained_weights_unavailable);
  }
}

}  // namespace
