#include "layers.hpp"

namespace carid::nets {

namespace {

struct BottleneckImpl : torch::nn::Module {
  BottleneckImpl(int in, int width, int stride) {
    const int out = width * 4;
    conv1 = register_module("conv1", conv(in, width, 1));
    bn1 = register_module("bn1", batch_norm(width));
    conv2 = register_module("conv2", conv(width, width, 3, stride, 1));
    bn2 = register_module("bn2", batch_norm(width));
    conv3 = register_module("conv3", conv(width, out, 1));
    bn3 = register_module("bn3", batch_norm(out));
    if (stride != 1 || in != out) {
      downsample = register_module("downsample",
                                   torch::nn::Sequential(conv(in, out, 1, stride), batch_norm(out)));
    }
  }

  torch::Tensor forward(torch::Tensor x) {
    auto identity = downsample ? downsample->forward(x) : x;
    auto y = torch::relu(bn1(conv1(x)));
    y = torch::relu(bn2(conv2(y)));
    y = bn3(conv3(y));
    return torch::relu(y + identity);
  }

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

struct ResNet50 : BackboneImpl {
  ResNet50() {
    conv1 = register_module("conv1", conv(3, 64, 7, 2, 3));
    bn1 = register_module("bn1", batch_norm(64));
    const int blocks[] = {3, 4, 6, 3};
    const int widths[] = {64, 128, 256, 512};
    int in = 64;
    for (int s = 0; s < 4; ++s) {
      torch::nn::Sequential layer;
      for (int b = 0; b < blocks[s]; ++b) {
        layer->push_back(Bottleneck(in, widths[s], (b == 0 && s > 0) ? 2 : 1));
        in = widths[s] * 4;
      }
      layers.push_back(register_module("layer" + std::to_string(s + 1), layer));
    }
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = torch::relu(bn1(conv1(x)));
    x = torch::max_pool2d(x, 3, 2, 1);
    for (auto& layer : layers) x = layer->forward(x);
    return x.mean({2, 3});
  }

  torch::nn::Conv2d conv1{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr};
  std::vector<torch::nn::Sequential> layers;
};

}  // namespace

std::shared_ptr<BackboneImpl> make_resnet50() { return std::make_shared<ResNet50>(); }

}  // namespace carid::nets
