#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>

namespace carid::nets {

namespace F = torch::nn::functional;

/// Common base: maps an image batch to pooled features (n, feature_dim).
struct BackboneImpl : torch::nn::Module {
  virtual torch::Tensor forward(torch::Tensor x) = 0;
};

inline torch::nn::Conv2d conv(int in, int out, int k, int stride = 1, int pad = 0, int groups = 1,
                              bool bias = false) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).groups(groups).bias(bias));
}

inline torch::nn::BatchNorm2d batch_norm(int c, double eps = 1e-5) {
  return torch::nn::BatchNorm2d(torch::nn::BatchNorm2dOptions(c).eps(eps));
}

inline torch::nn::LayerNorm layer_norm(int c, double eps = 1e-5) {
  return torch::nn::LayerNorm(torch::nn::LayerNormOptions({c}).eps(eps));
}

inline torch::nn::Linear linear(int in, int out, bool bias = true) {
  return torch::nn::Linear(torch::nn::LinearOptions(in, out).bias(bias));
}

inline void trunc_normal(torch::Tensor& t, double std) {
  torch::NoGradGuard guard;
  t.normal_(0.0, std).clamp_(-2.0 * std, 2.0 * std);
}

/// Fully-connected MLP with names fc1 / fc2.
struct MlpImpl : torch::nn::Module {
  MlpImpl(int dim, int hidden, bool silu = false) : silu_(silu) {
    fc1 = register_module("fc1", linear(dim, hidden));
    fc2 = register_module("fc2", linear(hidden, dim));
  }
  torch::Tensor forward(torch::Tensor x) {
    x = fc1(x);
    x = silu_ ? torch::silu(x) : torch::gelu(x);
    return fc2(x);
  }
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
  bool silu_;
};
TORCH_MODULE(Mlp);

/// Conv + BatchNorm (+ optional activation) with names conv / bn.
struct ConvNormActImpl : torch::nn::Module {
  enum class Act { none, relu, silu };
  ConvNormActImpl(int in, int out, int k, int stride, int groups, Act act, double eps = 1e-5) : act_(act) {
    conv_ = register_module("conv", conv(in, out, k, stride, ((stride - 1) + (k - 1)) / 2, groups));
    bn = register_module("bn", batch_norm(out, eps));
  }
  torch::Tensor forward(torch::Tensor x) {
    x = bn(conv_(x));
    if (act_ == Act::relu) return torch::relu(x);
    if (act_ == Act::silu) return torch::silu(x);
    return x;
  }
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
  Act act_;
};
TORCH_MODULE(ConvNormAct);

std::shared_ptr<BackboneImpl> make_resnet50();
std::shared_ptr<BackboneImpl> make_densenet161();
std::shared_ptr<BackboneImpl> make_efficientnetv2_b2();
std::shared_ptr<BackboneImpl> make_mobilevit_s();
std::shared_ptr<BackboneImpl> make_swin_s3_tiny();
std::shared_ptr<BackboneImpl> make_coat_lite_mini();

}  // namespace carid::nets
