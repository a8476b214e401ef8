#include "layers.hpp"

namespace carid::nets {

namespace {

constexpr int kGrowth = 48;
constexpr int kBottleneck = 4;

struct DenseLayerImpl : torch::nn::Module {
  explicit DenseLayerImpl(int in) {
    norm1 = register_module("norm1", batch_norm(in));
    conv1 = register_module("conv1", conv(in, kBottleneck * kGrowth, 1));
    norm2 = register_module("norm2", batch_norm(kBottleneck * kGrowth));
    conv2 = register_module("conv2", conv(kBottleneck * kGrowth, kGrowth, 3, 1, 1));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = conv1(torch::relu(norm1(x)));
    return conv2(torch::relu(norm2(y)));
  }
  torch::nn::BatchNorm2d norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(DenseLayer);

struct DenseBlockImpl : torch::nn::Module {
  DenseBlockImpl(int in, int n) {
    for (int i = 0; i < n; ++i) {
      layers.push_back(register_module("denselayer" + std::to_string(i + 1), DenseLayer(in + i * kGrowth)));
    }
  }
  torch::Tensor forward(torch::Tensor x) {
    std::vector<torch::Tensor> features{x};
    for (auto& layer : layers) features.push_back(layer->forward(torch::cat(features, 1)));
    return torch::cat(features, 1);
  }
  std::vector<DenseLayer> layers;
};
TORCH_MODULE(DenseBlock);

struct TransitionImpl : torch::nn::Module {
  TransitionImpl(int in, int out) {
    norm = register_module("norm", batch_norm(in));
    conv_ = register_module("conv", conv(in, out, 1));
  }
  torch::Tensor forward(torch::Tensor x) { return torch::avg_pool2d(conv_(torch::relu(norm(x))), 2, 2); }
  torch::nn::BatchNorm2d norm{nullptr};
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Transition);

struct Features : torch::nn::Module {
  Features() {
    conv0 = register_module("conv0", conv(3, 96, 7, 2, 3));
    norm0 = register_module("norm0", batch_norm(96));
    const int counts[] = {6, 12, 36, 24};
    int c = 96;
    for (int b = 0; b < 4; ++b) {
      blocks.push_back(register_module("denseblock" + std::to_string(b + 1), DenseBlock(c, counts[b])));
      c += counts[b] * kGrowth;
      if (b < 3) {
        transitions.push_back(register_module("transition" + std::to_string(b + 1), Transition(c, c / 2)));
        c /= 2;
      }
    }
    norm5 = register_module("norm5", batch_norm(c));
  }
  torch::Tensor forward(torch::Tensor x) {
    x = torch::max_pool2d(torch::relu(norm0(conv0(x))), 3, 2, 1);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      x = blocks[b]->forward(x);
      if (b < transitions.size()) x = transitions[b]->forward(x);
    }
    return norm5(x);
  }
  torch::nn::Conv2d conv0{nullptr};
  torch::nn::BatchNorm2d norm0{nullptr}, norm5{nullptr};
  std::vector<DenseBlock> blocks;
  std::vector<Transition> transitions;
};

struct DenseNet161 : BackboneImpl {
  DenseNet161() { features = register_module("features", std::make_shared<Features>()); }
  torch::Tensor forward(torch::Tensor x) override { return torch::relu(features->forward(x)).mean({2, 3}); }
  std::shared_ptr<Features> features;
};

}  // namespace

std::shared_ptr<BackboneImpl> make_densenet161() { return std::make_shared<DenseNet161>(); }

}  // namespace carid::nets
