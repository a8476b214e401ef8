#include "layers.hpp"

#include <cmath>

namespace carid::nets {

namespace {

using Act = ConvNormActImpl::Act;

struct BottleneckImpl : torch::nn::Module {
  BottleneckImpl(int in, int out, int stride, int ratio = 4) : shortcut_(in == out && stride == 1) {
    const int mid = in * ratio;
    conv1_1x1 = register_module("conv1_1x1", ConvNormAct(in, mid, 1, 1, 1, Act::silu));
    conv2_kxk = register_module("conv2_kxk", ConvNormAct(mid, mid, 3, stride, mid, Act::silu));
    conv3_1x1 = register_module("conv3_1x1", ConvNormAct(mid, out, 1, 1, 1, Act::none));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = conv3_1x1(conv2_kxk(conv1_1x1(x)));
    return shortcut_ ? y + x : y;
  }
  ConvNormAct conv1_1x1{nullptr}, conv2_kxk{nullptr}, conv3_1x1{nullptr};
  bool shortcut_;
};
TORCH_MODULE(Bottleneck);

struct AttentionImpl : torch::nn::Module {
  AttentionImpl(int dim, int heads) : heads_(heads), scale_(std::pow(dim / heads, -0.5)) {
    qkv = register_module("qkv", linear(dim, dim * 3));
    proj = register_module("proj", linear(dim, dim));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    const auto b = x.size(0), n = x.size(1), c = x.size(2);
    auto t = qkv(x).reshape({b, n, 3, heads_, c / heads_}).permute({2, 0, 3, 1, 4});
    auto q = t[0], k = t[1], v = t[2];
    auto attn = torch::softmax(torch::matmul(q * scale_, k.transpose(-2, -1)), -1);
    return proj(torch::matmul(attn, v).transpose(1, 2).reshape({b, n, c}));
  }
  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  int64_t heads_;
  double scale_;
};
TORCH_MODULE(Attention);

struct TransformerBlockImpl : torch::nn::Module {
  TransformerBlockImpl(int dim, int hidden) {
    norm1 = register_module("norm1", layer_norm(dim));
    attn = register_module("attn", Attention(dim, 4));
    norm2 = register_module("norm2", layer_norm(dim));
    mlp = register_module("mlp", Mlp(dim, hidden, true));
  }
  torch::Tensor forward(torch::Tensor x) {
    x = x + attn(norm1(x));
    return x + mlp(norm2(x));
  }
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  Attention attn{nullptr};
  Mlp mlp{nullptr};
};
TORCH_MODULE(TransformerBlock);

struct MobileVitBlockImpl : torch::nn::Module {
  MobileVitBlockImpl(int chs, int dim, int depth) {
    conv_kxk = register_module("conv_kxk", ConvNormAct(chs, chs, 3, 1, 1, Act::silu));
    conv_1x1 = register_module("conv_1x1", conv(chs, dim, 1));
    transformer = register_module("transformer", torch::nn::Sequential());
    for (int i = 0; i < depth; ++i) transformer->push_back(TransformerBlock(dim, dim * 2));
    norm = register_module("norm", layer_norm(dim));
    conv_proj = register_module("conv_proj", ConvNormAct(dim, chs, 1, 1, 1, Act::silu));
    conv_fusion = register_module("conv_fusion", ConvNormAct(2 * chs, chs, 3, 1, 1, Act::silu));
  }

  torch::Tensor forward(const torch::Tensor& input) {
    constexpr int64_t p = 2;
    auto x = conv_1x1(conv_kxk(input));
    const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    const int64_t nh = (h + p - 1) / p, nw = (w + p - 1) / p;
    const bool resize = nh * p != h || nw * p != w;
    if (resize) {
      x = F::interpolate(x, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{nh * p, nw * p})
                                .mode(torch::kBilinear)
                                .align_corners(false));
    }
    const int64_t n = nh * nw;
    x = x.reshape({b * c * nh, p, nw, p}).transpose(1, 2);
    x = x.reshape({b, c, n, p * p}).transpose(1, 3).reshape({b * p * p, n, -1});
    x = norm(transformer->forward(x));
    x = x.contiguous().view({b, p * p, n, -1});
    x = x.transpose(1, 3).reshape({b * c * nh, nw, p, p});
    x = x.transpose(1, 2).reshape({b, c, nh * p, nw * p});
    if (resize) {
      x = F::interpolate(x, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{h, w})
                                .mode(torch::kBilinear)
                                .align_corners(false));
    }
    x = conv_proj(x);
    return conv_fusion(torch::cat({input, x}, 1));
  }

  ConvNormAct conv_kxk{nullptr}, conv_proj{nullptr}, conv_fusion{nullptr};
  torch::nn::Conv2d conv_1x1{nullptr};
  torch::nn::Sequential transformer{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(MobileVitBlock);

struct MobileVitS : BackboneImpl {
  MobileVitS() {
    stem = register_module("stem", ConvNormAct(3, 16, 3, 2, 1, Act::silu));
    stages = register_module("stages", torch::nn::ModuleList());

    torch::nn::Sequential s0;
    s0->push_back(Bottleneck(16, 32, 1));
    stages->push_back(s0);
    stage_list.push_back(s0);

    torch::nn::Sequential s1;
    s1->push_back(Bottleneck(32, 64, 2));
    s1->push_back(Bottleneck(64, 64, 1));
    s1->push_back(Bottleneck(64, 64, 1));
    stages->push_back(s1);
    stage_list.push_back(s1);

    const int chs[] = {96, 128, 160};
    const int dims[] = {144, 192, 240};
    const int depths[] = {2, 4, 3};
    int in = 64;
    for (int i = 0; i < 3; ++i) {
      torch::nn::Sequential s;
      s->push_back(Bottleneck(in, chs[i], 2));
      s->push_back(MobileVitBlock(chs[i], dims[i], depths[i]));
      stages->push_back(s);
      stage_list.push_back(s);
      in = chs[i];
    }
    final_conv = register_module("final_conv", ConvNormAct(160, 640, 1, 1, 1, Act::silu));
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = stem(x);
    for (auto& s : stage_list) x = s->forward(x);
    return final_conv(x).mean({2, 3});
  }

  ConvNormAct stem{nullptr}, final_conv{nullptr};
  torch::nn::ModuleList stages{nullptr};
  std::vector<torch::nn::Sequential> stage_list;
};

}  // namespace

std::shared_ptr<BackboneImpl> make_mobilevit_s() { return std::make_shared<MobileVitS>(); }

}  // namespace carid::nets
