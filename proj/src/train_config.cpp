#include "carid/train_config.hpp"

namespace carid {

namespace {

const ConfigNode& at(const ConfigNode& node, std::string_view path) {
  const ConfigNode* v = node.find_path(path);
  if (!v) throw Error(Errc::invalid_config, std::string(path) + " is missing");
  return *v;
}

}  // namespace

std::string_view to_string(OptimizerKind kind) noexcept {
  return kind == OptimizerKind::adam ? "adam" : "sgd";
}

TrainConfig train_config_from(const ConfigNode& resolved) {
  TrainConfig c;
  const auto& target = at(resolved, "model.optimizer.target").as_string();
  if (target != "adam" && target != "sgd") throw Error(Errc::invalid_config, "unknown optimizer " + target);
  c.optimizer = target == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  c.lr = at(resolved, "model.optimizer.lr").as_double();
  c.weight_decay = at(resolved, "model.optimizer.weight_decay").as_double();
  c.momentum = at(resolved, "model.optimizer.momentum").as_double();
  c.batch_size = static_cast<int>(at(resolved, "data.batch_size").as_int());
  c.epochs = static_cast<int>(at(resolved, "trainer.epochs").as_int());
  c.patience = static_cast<int>(at(resolved, "model.scheduler.patience").as_int());
  c.factor = at(resolved, "model.scheduler.factor").as_double();
  c.threshold = at(resolved, "model.scheduler.threshold").as_double();
  c.dropout_rate = at(resolved, "model.net.dropout_value").as_double();
  c.seed = static_cast<std::uint64_t>(at(resolved, "seed").as_int());
  c.threads = static_cast<int>(at(resolved, "trainer.threads").as_int());
  c.num_workers = static_cast<int>(at(resolved, "data.num_workers").as_int());
  return c;
}

BackboneSpec backbone_spec_from(const ConfigNode& resolved) {
  BackboneSpec spec = make_spec(at(resolved, "model.name").as_string(), at(resolved, "model.pretrained").as_bool(),
                                at(resolved, "model.unfreeze_last_block").as_bool());
  const ConfigNode& size = at(resolved, "augmentation.output_size");
  if (!size.is_null()) {
    spec.input_height = static_cast<int>(size.as_list()[0].as_int());
    spec.input_width = static_cast<int>(size.as_list()[1].as_int());
  }
  return spec;
}

AugmentationPolicy policy_from(const ConfigNode& resolved) {
  const auto& info = find_backbone(at(resolved, "model.name").as_string());
  PolicyDefaults defaults;
  defaults.output_height = info.input_height;
  defaults.output_width = info.input_width;
  defaults.normalization = info.normalization;
  return build_policy(at(resolved, "augmentation"), defaults);
}

SplitRatios split_ratios_from(const ConfigNode& resolved) {
  return SplitRatios{at(resolved, "data.split.train").as_double(), at(resolved, "data.split.val").as_double(),
                     at(resolved, "data.split.test").as_double()};
}

}  // namespace carid
