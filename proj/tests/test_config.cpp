#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "carid/config.hpp"
#include "carid/rng.hpp"
#include "synthetic.hpp"

namespace carid {
void PrintTo(const ConfigNode& node, std::ostream* os) { *os << "\n" << to_yaml(node); }
}  // namespace carid

namespace {

using namespace carid;
namespace fs = std::filesystem;

const fs::path kConfigs = fs::path(CARID_SOURCE_DIR) / "configs";

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

// A small config root: two model files, one data file, one trainer file.
fs::path mini_root() {
  const auto root = fixtures::temp_dir("cfg");
  write(root / "defaults.yaml",
        "defaults:\n  - data: small\n  - model: base\n  - trainer: short\n  - _self_\n"
        "name: mini\nseed: 3\n");
  write(root / "data/small.yaml", "root: /data/cars\nbatch_size: 64\n");
  write(root / "model/base.yaml", "name: resnet50\noptimizer:\n  lr: 0.01\n  target: sgd\nnet:\n  dropout_value: 0.4\n");
  write(root / "model/other.yaml", "name: densenet161\noptimizer:\n  lr: 0.002\n");
  write(root / "trainer/short.yaml", "epochs: 3\n");
  return root;
}

Errc error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::io_error;
}

std::string text_at(const ConfigNode& n, const char* path) { return n.find_path(path)->render(); }
double number_at(const ConfigNode& n, const char* path) { return n.find_path(path)->as_double(); }

// ---------------------------------------------------------------------------
// Golden compose cases

TEST(Compose, DisjointGroupsUnion) {
  const auto root = mini_root();
  const std::vector<DefaultsEntry> d = {{"data", "small"}, {"trainer", "short"}};
  const auto c = compose(root, d, {});
  EXPECT_EQ(text_at(c, "data.root"), "/data/cars");
  EXPECT_EQ(c.find_path("data.batch_size")->as_int(), 64);
  EXPECT_EQ(c.find_path("trainer.epochs")->as_int(), 3);
  // Untouched sections keep their schema defaults.
  EXPECT_EQ(*c.find_path("model"), *default_config().find_path("model"));
}

TEST(Compose, LaterEntriesWinAndSelfPositionMatters) {
  const auto root = mini_root();
  write(root / "defaults_first.yaml", "");
  // Same group listed twice: the later file wins key by key.
  const std::vector<DefaultsEntry> twice = {{"model", "base"}, {"model", "other"}};
  const auto c = compose(root, twice, {});
  EXPECT_EQ(text_at(c, "model.name"), "densenet161");
  EXPECT_DOUBLE_EQ(number_at(c, "model.optimizer.lr"), 0.002);
  EXPECT_EQ(text_at(c, "model.optimizer.target"), "sgd");  // only in the first file
  EXPECT_DOUBLE_EQ(number_at(c, "model.net.dropout_value"), 0.4);

  // _self_ last: root keys override group files; first: group files win.
  write(root / "defaults.yaml", "defaults:\n  - trainer: short\n  - _self_\ntrainer:\n  epochs: 9\n");
  EXPECT_EQ(compose_root(root, {}).find_path("trainer.epochs")->as_int(), 9);
  write(root / "defaults.yaml", "defaults:\n  - _self_\n  - trainer: short\ntrainer:\n  epochs: 9\n");
  EXPECT_EQ(compose_root(root, {}).find_path("trainer.epochs")->as_int(), 3);
}

TEST(Compose, DottedOverrideSetsLearningRate) {
  const auto root = mini_root();
  const std::vector<std::string> o = {"model.optimizer.lr=0.00157"};
  const auto c = compose_root(root, o);
  EXPECT_DOUBLE_EQ(number_at(c, "model.optimizer.lr"), 0.00157);
  EXPECT_TRUE(c.find_path("model.optimizer.lr")->is_float());
  // Overrides apply after _self_ and in command-line order.
  const std::vector<std::string> o2 = {"seed=5", "seed=7", "name=\"quoted name\""};
  const auto c2 = compose_root(root, o2);
  EXPECT_EQ(c2.find_path("seed")->as_int(), 7);
  EXPECT_EQ(text_at(c2, "name"), "quoted name");
}

TEST(Compose, GroupSelectionOverride) {
  const auto root = mini_root();
  const std::vector<std::string> o = {"model=other", "model.optimizer.lr=0.5"};
  const auto c = compose_root(root, o);
  EXPECT_EQ(text_at(c, "model.name"), "densenet161");
  EXPECT_DOUBLE_EQ(number_at(c, "model.optimizer.lr"), 0.5);
  EXPECT_EQ(text_at(c, "model.optimizer.target"), "adam");  // base.yaml not merged
  const std::vector<std::string> missing = {"model=nope"};
  EXPECT_EQ(error_of([&] { compose_root(root, missing); }), Errc::missing_group_file);
}

TEST(Compose, UnknownOverridePathIsRejected) {
  const auto root = mini_root();
  for (const char* item : {"model.nonexistent=1", "modle.optimizer.lr=0.1", "data=small.extra=1", "nosuch=1"}) {
    const std::vector<std::string> o = {item};
    const auto code = error_of([&] { compose_root(root, o); });
    EXPECT_TRUE(code == Errc::unknown_override_path || code == Errc::missing_group_file) << item;
  }
  const std::vector<std::string> bad = {"model.optimizer.lr"};
  EXPECT_EQ(error_of([&] { compose_root(root, bad); }), Errc::parse_error);
}

TEST(Compose, TypeMismatchNamesThePath) {
  const auto root = mini_root();
  for (const char* item : {"model.optimizer.lr=fast", "data.batch_size=3.5", "model.pretrained=maybe",
                           "augmentation.output_size=[1.5, 2]", "model.optimizer=0.1"}) {
    const std::vector<std::string> o = {item};
    try {
      compose_root(root, o);
      ADD_FAILURE() << item;
    } catch (const Error& e) {
      EXPECT_TRUE(e.code() == Errc::type_mismatch || e.code() == Errc::unknown_override_path) << item;
    }
  }
  const std::vector<std::string> o = {"data.batch_size=abc"};
  try {
    compose_root(root, o);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::type_mismatch);
    EXPECT_NE(std::string(e.what()).find("data.batch_size"), std::string::npos);
  }
}

TEST(Compose, MissingGroupFileAndParseErrorLocation) {
  const auto root = mini_root();
  const std::vector<DefaultsEntry> missing = {{"model", "ghost"}};
  EXPECT_EQ(error_of([&] { compose(root, missing, {}); }), Errc::missing_group_file);
  const std::vector<DefaultsEntry> unknown_group = {{"callbacks", "x"}};
  EXPECT_EQ(error_of([&] { compose(root, unknown_group, {}); }), Errc::missing_group_file);

  write(root / "model/broken.yaml", "name: resnet50\noptimizer:\n  lr: [0.1\n  target: adam\n");
  const std::vector<DefaultsEntry> broken = {{"model", "broken"}};
  try {
    compose(root, broken, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::parse_error);
    const std::string what = e.what();
    EXPECT_NE(what.find("broken.yaml"), std::string::npos) << what;
    EXPECT_NE(what.find(":4"), std::string::npos) << what;
  }
}

TEST(Compose, StrictSchemaRejectsUnknownKeysInFiles) {
  const auto root = mini_root();
  write(root / "model/typo.yaml", "name: resnet50\noptimiser:\n  lr: 0.1\n");
  const std::vector<DefaultsEntry> d = {{"model", "typo"}};
  try {
    compose(root, d, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_config);
    EXPECT_NE(std::string(e.what()).find("model.optimiser"), std::string::npos) << e.what();
  }
  // Without validation the tree still composes, and validate() lists the problem.
  const auto c = compose(root, d, {}, ComposeOptions{false});
  const auto v = validate(c);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].path, "model.optimiser");
  EXPECT_EQ(v[0].constraint, "unknown key");
}

TEST(Compose, RangeViolationsFailComposition) {
  const auto root = mini_root();
  for (const char* item : {"data.batch_size=48", "model.optimizer.lr=-0.001", "model.net.dropout_value=1.0",
                           "model.name=vgg16", "data.split.train=0.9"}) {
    const std::vector<std::string> o = {item};
    EXPECT_EQ(error_of([&] { compose_root(root, o); }), Errc::invalid_config) << item;
  }
}

TEST(Compose, RepositoryConfigsComposeForEveryModel) {
  const auto base = compose_root(kConfigs, {});
  EXPECT_EQ(text_at(base, "model.name"), "efficientnetv2_b2");
  EXPECT_DOUBLE_EQ(number_at(base, "model.optimizer.lr"), 0.00157);
  EXPECT_DOUBLE_EQ(number_at(base, "model.net.dropout_value"), 0.366);
  for (const auto& entry : fs::directory_iterator(kConfigs / "model")) {
    const std::vector<std::string> o = {"model=" + entry.path().stem().string()};
    const auto c = compose_root(kConfigs, o);
    EXPECT_EQ(text_at(c, "model.name"), entry.path().stem().string());
    EXPECT_TRUE(validate(c).empty());
  }
  for (const auto& entry : fs::directory_iterator(kConfigs / "augmentation")) {
    const std::vector<std::string> o = {"augmentation=" + entry.path().stem().string()};
    EXPECT_NO_THROW(compose_root(kConfigs, o)) << entry.path();
  }
}

// ---------------------------------------------------------------------------

TEST(Validate, ExamplesAndTuneMode) {
  ConfigNode c = default_config();
  EXPECT_TRUE(validate(c).empty());
  c.set_path("data.batch_size", 64);
  EXPECT_TRUE(validate(c).empty());

  c.set_path("model.optimizer.lr", -0.01);
  auto v = validate(c);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].path, "model.optimizer.lr");
  EXPECT_EQ(v[0].value, "-0.01");
  EXPECT_FALSE(v[0].constraint.empty());

  c = compose_root(kConfigs, {});
  EXPECT_TRUE(validate(c, ValidationMode::tune).empty());
  c.set_path("model.net.dropout_value", 0.7);
  EXPECT_TRUE(validate(c, ValidationMode::train).empty());
  v = validate(c, ValidationMode::tune);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].path, "model.net.dropout_value");
  EXPECT_NE(v[0].constraint.find("0.3"), std::string::npos) << v[0].constraint;
  EXPECT_NE(v[0].constraint.find("0.6"), std::string::npos) << v[0].constraint;

  c = default_config();
  c.erase("seed");
  v = validate(c);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].constraint, "required");
  EXPECT_FALSE(format_violations(v).empty());
}

TEST(OverrideValue, PrecedenceIntFloatBoolString) {
  EXPECT_TRUE(parse_override_value("42").is_int());
  EXPECT_TRUE(parse_override_value("-7").is_int());
  EXPECT_TRUE(parse_override_value("0.00157").is_float());
  EXPECT_TRUE(parse_override_value("1e-3").is_float());
  EXPECT_TRUE(parse_override_value("true").is_bool());
  EXPECT_TRUE(parse_override_value("False").is_bool());
  EXPECT_TRUE(parse_override_value("adam").is_string());
  EXPECT_TRUE(parse_override_value("'42'").is_string());
  EXPECT_TRUE(parse_override_value("null").is_null());
  EXPECT_EQ(parse_override_value("[1, 2]").as_list().size(), 2u);
  EXPECT_TRUE(parse_override_value("{a: 1}").is_map());
}

TEST(Config, IntegersInFloatFieldsAreCanonicalised) {
  const auto root = mini_root();
  const std::vector<std::string> o = {"model.optimizer.lr=1", "augmentation.mean=[0, 1, 0.5]"};
  const auto c = compose_root(root, o);
  EXPECT_TRUE(c.find_path("model.optimizer.lr")->is_float());
  for (const auto& m : c.find_path("augmentation.mean")->as_list()) EXPECT_TRUE(m.is_float());
}

TEST(Config, EnvironmentEscape) {
  ::setenv("CARID_TEST_DATA_ROOT", "/mnt/cars", 1);
  const auto root = mini_root();
  const std::vector<std::string> o = {"data.root=${env:CARID_TEST_DATA_ROOT}/v2"};
  EXPECT_EQ(text_at(compose_root(root, o), "data.root"), "/mnt/cars/v2");
  const std::vector<std::string> unset = {"data.root=${env:CARID_TEST_SURELY_UNSET_VAR}"};
  EXPECT_EQ(error_of([&] { compose_root(root, unset); }), Errc::invalid_config);
}

// ---------------------------------------------------------------------------
// Properties

TEST(Config, SerializeReparseRoundTrip) {
  for (const auto& model : {"efficientnetv2_b2", "resnet50", "swin_s3_tiny"}) {
    const std::vector<std::string> o = {std::string("model=") + model, "model.optimizer.lr=0.00157",
                                        "augmentation=full", "serve.cors_origin=http://localhost:5173"};
    const auto c = compose_root(kConfigs, o);
    const auto text = to_yaml(c);
    EXPECT_EQ(parse_yaml(text), c) << text;
    const auto path = fixtures::temp_dir("rt") / "config.yaml";
    save_yaml_file(c, path);
    EXPECT_EQ(load_yaml_file(path), c);
  }
}

TEST(Config, ComposingAResolvedTreeIsIdentity) {
  const std::vector<std::string> o = {"model=resnet50", "seed=11"};
  const auto c = compose_root(kConfigs, o);
  EXPECT_EQ(compose_resolved(c, {}), c);
  EXPECT_EQ(compose_resolved(parse_yaml(to_yaml(c)), {}), c);
  const std::vector<std::string> more = {"seed=12"};
  EXPECT_EQ(compose_resolved(c, more).find_path("seed")->as_int(), 12);
  const std::vector<std::string> group = {"model=resnet50"};
  EXPECT_EQ(error_of([&] { compose_resolved(c, group); }), Errc::unknown_override_path);
}

// Keys "a"/"b" always hold maps and "c"/"d" always hold leaves, so merges
// never hit a map/leaf clash.
ConfigNode random_tree(CounterRng& rng, int depth) {
  static const char* keys[] = {"a", "b", "c", "d"};
  ConfigNode n = ConfigNode::map();
  const int count = 1 + static_cast<int>(rng.below(3));
  for (int i = 0; i < count; ++i) {
    const auto k = rng.below(depth > 0 ? 4 : 2) + (depth > 0 ? 0 : 2);
    const char* key = keys[k];
    if (k < 2) {
      n.set(key, random_tree(rng, depth - 1));
    } else if (rng.bernoulli(0.5)) {
      n.set(key, static_cast<std::int64_t>(rng.below(100)));
    } else {
      n.set(key, ConfigNode::List{ConfigNode(1), ConfigNode("x")});
    }
  }
  return n;
}

TEST(Config, MergeIsAssociative) {
  CounterRng rng(derive_key({99}));
  for (int i = 0; i < 500; ++i) {
    const auto a = random_tree(rng, 3), b = random_tree(rng, 3), c = random_tree(rng, 3);
    ASSERT_EQ(merge(merge(a, b), c), merge(a, merge(b, c)));
    ASSERT_EQ(merge(a, a), a);
  }
}

TEST(Config, MergeRejectsSectionLeafClash) {
  const auto a = parse_yaml("x: {p: 1}"), b = parse_yaml("x: 5"), c = parse_yaml("x: {q: 2}");
  EXPECT_EQ(error_of([&] { merge(a, b); }), Errc::type_mismatch);
  EXPECT_EQ(error_of([&] { merge(a, merge(b, c)); }), Errc::type_mismatch);
  EXPECT_EQ(error_of([&] { merge(a, parse_yaml("x: null")); }), Errc::type_mismatch);
  const auto root = mini_root();
  write(root / "model/flat.yaml", "optimizer: 0.1\n");
  const std::vector<DefaultsEntry> d = {{"model", "flat"}};
  try {
    compose(root, d, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::type_mismatch);
    EXPECT_NE(std::string(e.what()).find("model.optimizer"), std::string::npos) << e.what();
  }
}

}  // namespace
