#include "carid/model.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include "backbones/layers.hpp"
#include "carid/rng.hpp"

namespace carid {

namespace {

bool has_prefix(const std::string& name, const std::string& prefix) {
  return name == prefix || (name.size() > prefix.size() && name.compare(0, prefix.size(), prefix) == 0 &&
                            name[prefix.size()] == '.');
}

bool in_last_block(const std::string& backbone_name, const BackboneInfo& info) {
  for (const auto& p : info.last_block) {
    if (has_prefix(backbone_name, p)) return true;
  }
  return false;
}

// Upstream tensors with no counterpart here: classifiers and aliases of
// modules that upstream registers twice.
bool ignorable(const std::string& key) {
  for (const char* p : {"fc", "classifier", "head"}) {
    if (has_prefix(key, p)) return true;
  }
  if (key.rfind("serial_blocks", 0) == 0 &&
      (key.find(".cpe.") != std::string::npos || key.find(".factoratt_crpe.crpe.") != std::string::npos)) {
    return true;
  }
  return false;
}

// Mirrors the upstream random initialisation: fan-out normal for convs,
// unit/zero norms, and small truncated normals for transformer linears.
void init_like_upstream(torch::nn::Module& backbone, bool transformer) {
  torch::NoGradGuard guard;
  for (auto& m : backbone.modules(false)) {
    if (auto* c = dynamic_cast<torch::nn::Conv2dImpl*>(m.get())) {
      const auto& k = c->options.kernel_size();
      const double fan_out = static_cast<double>((*k)[0] * (*k)[1] * c->options.out_channels()) /
                             static_cast<double>(c->options.groups());
      c->weight.normal_(0.0, std::sqrt(2.0 / fan_out));
      if (c->bias.defined()) c->bias.zero_();
    } else if (auto* bn = dynamic_cast<torch::nn::BatchNorm2dImpl*>(m.get())) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
    } else if (auto* ln = dynamic_cast<torch::nn::LayerNormImpl*>(m.get())) {
      ln->weight.fill_(1.0);
      ln->bias.zero_();
    } else if (auto* fc = dynamic_cast<torch::nn::LinearImpl*>(m.get()); fc && transformer) {
      nets::trunc_normal(fc->weight, 0.02);
      if (fc->bias.defined()) fc->bias.zero_();
    }
  }
}

}  // namespace

std::shared_ptr<nets::BackboneImpl> create_backbone(std::string_view name) {
  find_backbone(name);
  if (name == "resnet50") return nets::make_resnet50();
  if (name == "densenet161") return nets::make_densenet161();
  if (name == "efficientnetv2_b2") return nets::make_efficientnetv2_b2();
  if (name == "mobilevit_s") return nets::make_mobilevit_s();
  if (name == "swin_s3_tiny") return nets::make_swin_s3_tiny();
  if (name == "coat_lite_mini") return nets::make_coat_lite_mini();
  throw Error(Errc::unknown_backbone, std::string(name));
}

ModelImpl::ModelImpl(BackboneSpec spec, int num_classes, double dropout_rate)
    : spec_(std::move(spec)), num_classes_(num_classes), dropout_rate_(dropout_rate) {
  const auto& info = find_backbone(spec_.name);
  if (spec_.feature_dim == 0) spec_.feature_dim = info.feature_dim;
  if (spec_.feature_dim != info.feature_dim) {
    throw Error(Errc::invalid_argument, "feature_dim " + std::to_string(spec_.feature_dim) + " does not match " +
                                            spec_.name + " (" + std::to_string(info.feature_dim) + ")");
  }
  if (spec_.input_height == 0) spec_.input_height = info.input_height;
  if (spec_.input_width == 0) spec_.input_width = info.input_width;
  if (num_classes < 2) throw Error(Errc::invalid_argument, "num_classes must be >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw Error(Errc::invalid_argument, "dropout rate must lie in [0, 1)");
  }
  backbone = register_module("backbone", create_backbone(spec_.name));
  init_like_upstream(*backbone, spec_.name == "swin_s3_tiny" || spec_.name == "coat_lite_mini");
  head = register_module("head", torch::nn::Linear(spec_.feature_dim, num_classes));
}

torch::Tensor ModelImpl::features(const torch::Tensor& batch) {
  if (batch.dim() != 4 || batch.size(1) != 3 || batch.size(2) != spec_.input_height ||
      batch.size(3) != spec_.input_width) {
    throw Error(Errc::shape_mismatch, "expected (n, 3, " + std::to_string(spec_.input_height) + ", " +
                                          std::to_string(spec_.input_width) + "), got " +
                                          c10::str(batch.sizes()));
  }
  return backbone->forward(batch);
}

torch::Tensor ModelImpl::head_forward(const torch::Tensor& features) {
  return head(torch::dropout(features, dropout_rate_, is_training()));
}

torch::Tensor ModelImpl::forward(const torch::Tensor& batch) { return head_forward(features(batch)); }

void ModelImpl::train(bool on) {
  torch::nn::Module::train(on);
  if (!on) return;
  for (const auto& item : backbone->named_modules("", false)) {
    auto* bn = dynamic_cast<torch::nn::BatchNorm2dImpl*>(item.value().get());
    if (bn && bn->weight.defined() && !bn->weight.requires_grad()) bn->eval();
  }
}

void load_backbone_weights(torch::nn::Module& backbone, const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(Errc::pretrained_weights_unavailable, file.string() + " not found");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::map<std::string, torch::Tensor> source;
  try {
    auto value = torch::pickle_load(bytes);
    for (const auto& entry : value.toGenericDict()) {
      source[entry.key().toStringRef()] = entry.value().toTensor();
    }
  } catch (const c10::Error& e) {
    throw Error(Errc::pretrained_weights_unavailable, file.string() + ": " + e.what_without_backtrace());
  }

  torch::NoGradGuard guard;
  std::size_t used = 0;
  auto copy = [&](const std::string& name, torch::Tensor& target) {
    auto it = source.find(name);
    if (it == source.end()) throw Error(Errc::pretrained_weights_unavailable, file.string() + ": missing " + name);
    if (it->second.sizes() != target.sizes()) {
      throw Error(Errc::pretrained_weights_unavailable, file.string() + ": shape mismatch for " + name);
    }
    target.copy_(it->second.to(target.dtype()));
    ++used;
  };
  for (auto& p : backbone.named_parameters()) copy(p.key(), p.value());
  for (auto& b : backbone.named_buffers()) copy(b.key(), b.value());
  for (const auto& [key, _] : source) {
    if (ignorable(key)) continue;
    bool known = false;
    for (auto& p : backbone.named_parameters()) known = known || p.key() == key;
    for (auto& b : backbone.named_buffers()) known = known || b.key() == key;
    if (!known) throw Error(Errc::pretrained_weights_unavailable, file.string() + ": unexpected tensor " + key);
  }
}

Model build_model(const BackboneSpec& spec, int num_classes, double dropout_rate, const ModelOptions& options) {
  const auto& info = find_backbone(spec.name);
  torch::manual_seed(derive_key({options.seed, hash_label("backbone_init")}) >> 1);
  Model model(spec, num_classes, dropout_rate);
  if (spec.pretrained) {
    load_backbone_weights(*model->backbone, options.weights_dir / (std::string(info.name) + ".pth"));
  }

  torch::NoGradGuard guard;
  for (auto& p : model->backbone->named_parameters()) {
    p.value().set_requires_grad(spec.unfreeze_last_block && in_last_block(p.key(), info));
  }
  // Fresh head: zero bias, weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from a counter stream.
  const double bound = 1.0 / std::sqrt(static_cast<double>(model->spec().feature_dim));
  CounterRng rng(derive_key({options.seed, hash_label("head_init")}));
  auto w = torch::empty_like(model->head->weight);
  auto acc = w.accessor<float, 2>();
  for (int64_t r = 0; r < w.size(0); ++r) {
    for (int64_t c = 0; c < w.size(1); ++c) acc[r][c] = static_cast<float>(rng.uniform(-bound, bound));
  }
  model->head->weight.copy_(w);
  model->head->bias.zero_();
  model->eval();
  return model;
}

FreezeReport freeze_report(const Model& model) {
  FreezeReport report;
  for (const auto& p : model->named_parameters()) {
    if (p.value().requires_grad()) {
      report.trainable_params += p.value().numel();
      report.trainable_tensors.push_back(p.key());
    } else {
      report.frozen_params += p.value().numel();
    }
  }
  return report;
}

std::vector<std::string> declared_trainable(const Model& model) {
  const auto& info = find_backbone(model->spec().name);
  std::vector<std::string> out;
  for (const auto& p : model->named_parameters()) {
    const auto& name = p.key();
    if (has_prefix(name, "head")) {
      out.push_back(name);
    } else if (model->spec().unfreeze_last_block && name.rfind("backbone.", 0) == 0 &&
               in_last_block(name.substr(9), info)) {
      out.push_back(name);
    }
  }
  return out;
}

torch::Tensor forward(Model& model, const torch::Tensor& batch, Mode mode) {
  model->train(mode == Mode::train);
  if (mode == Mode::eval) {
    torch::NoGradGuard guard;
    return model->forward(batch);
  }
  return model->forward(batch);
}

}  // namespace carid
