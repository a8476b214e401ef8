#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "carid/backbone_registry.hpp"

namespace carid {

namespace nets {
struct BackboneImpl;
}

enum class Mode { train, eval };

/// Backbone ("backbone.*") followed by an inverted-dropout + linear head
/// ("head.*").
class ModelImpl : public torch::nn::Module {
 public:
  ModelImpl(BackboneSpec spec, int num_classes, double dropout_rate);

  /// Logits for a (n, 3, h, w) batch in the current train/eval state.
  /// Throws ShapeMismatch.
  torch::Tensor forward(const torch::Tensor& batch);
  torch::Tensor features(const torch::Tensor& batch);
  torch::Tensor head_forward(const torch::Tensor& features);

  /// Frozen batch-norm layers stay in eval mode when training.
  void train(bool on = true) override;

  const BackboneSpec& spec() const noexcept { return spec_; }
  int num_classes() const noexcept { return num_classes_; }
  double dropout_rate() const noexcept { return dropout_rate_; }

  std::shared_ptr<nets::BackboneImpl> backbone;
  torch::nn::Linear head{nullptr};

 private:
  BackboneSpec spec_;
  int num_classes_;
  double dropout_rate_;
};
TORCH_MODULE(Model);

struct ModelOptions {
  /// `<weights_dir>/<name>.pth`: a plain dict of upstream state_dict tensors.
  std::filesystem::path weights_dir = "weights";
  /// Seeds the head and, without pretrained weights, the backbone init.
  std::uint64_t seed = 0;
};

/// Throws UnknownBackbone, PretrainedWeightsUnavailable, InvalidArgument.
Model build_model(const BackboneSpec& spec, int num_classes, double dropout_rate,
                  const ModelOptions& options = {});

std::shared_ptr<nets::BackboneImpl> create_backbone(std::string_view name);

/// Copies upstream weights into a backbone by parameter name. Classifier
/// tensors of the upstream model are ignored; anything else missing or
/// mis-shaped throws PretrainedWeightsUnavailable.
void load_backbone_weights(torch::nn::Module& backbone, const std::filesystem::path& file);

struct FreezeReport {
  std::int64_t trainable_params = 0;
  std::int64_t frozen_params = 0;
  std::vector<std::string> trainable_tensors;
};

FreezeReport freeze_report(const Model& model);

/// Parameter names the registry declares trainable for this spec.
std::vector<std::string> declared_trainable(const Model& model);

torch::Tensor forward(Model& model, const torch::Tensor& batch, Mode mode);

}  // namespace carid
