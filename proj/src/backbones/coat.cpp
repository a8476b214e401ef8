#include "layers.hpp"

#include <cmath>

namespace carid::nets {

namespace {

constexpr int kHeads = 8;
constexpr double kEps = 1e-6;

struct ConvPosEncImpl : torch::nn::Module {
  explicit ConvPosEncImpl(int dim) { proj = register_module("proj", conv(dim, dim, 3, 1, 1, dim, true)); }
  torch::Tensor forward(const torch::Tensor& x, int64_t h, int64_t w) {
    const auto b = x.size(0), c = x.size(2);
    using torch::indexing::Slice;
    auto cls = x.index({Slice(), Slice(0, 1)});
    auto feat = x.index({Slice(), Slice(1, torch::indexing::None)}).transpose(1, 2).reshape({b, c, h, w});
    auto y = (proj(feat) + feat).flatten(2).transpose(1, 2);
    return torch::cat({cls, y}, 1);
  }
  torch::nn::Conv2d proj{nullptr};
};
TORCH_MODULE(ConvPosEnc);

struct ConvRelPosEncImpl : torch::nn::Module {
  explicit ConvRelPosEncImpl(int dim) {
    const int head_dim = dim / kHeads;
    const std::pair<int, int> windows[] = {{3, 2}, {5, 3}, {7, 3}};
    conv_list = register_module("conv_list", torch::nn::ModuleList());
    for (const auto& [k, heads] : windows) {
      const int ch = heads * head_dim;
      auto c = conv(ch, ch, k, 1, k / 2, ch, true);
      conv_list->push_back(c);
      convs.push_back(c);
      splits.push_back(ch);
    }
  }
  torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& v, int64_t h, int64_t w) {
    const auto b = q.size(0), heads = q.size(1), c = q.size(3);
    using torch::indexing::Slice;
    auto q_img = q.index({Slice(), Slice(), Slice(1, torch::indexing::None)});
    auto v_img = v.index({Slice(), Slice(), Slice(1, torch::indexing::None)});
    v_img = v_img.transpose(-1, -2).reshape({b, heads * c, h, w});
    auto parts = torch::split_with_sizes(v_img, splits, 1);
    std::vector<torch::Tensor> out;
    for (std::size_t i = 0; i < convs.size(); ++i) out.push_back(convs[i]->forward(parts[i]));
    auto conv_v = torch::cat(out, 1).reshape({b, heads, c, h * w}).transpose(-1, -2);
    return F::pad(q_img * conv_v, F::PadFuncOptions({0, 0, 1, 0, 0, 0}));
  }
  torch::nn::ModuleList conv_list{nullptr};
  std::vector<torch::nn::Conv2d> convs;
  std::vector<int64_t> splits;
};
TORCH_MODULE(ConvRelPosEnc);

struct FactorAttnImpl : torch::nn::Module {
  FactorAttnImpl(int dim, ConvRelPosEnc shared) : crpe(std::move(shared)) {
    qkv = register_module("qkv", linear(dim, dim * 3));
    proj = register_module("proj", linear(dim, dim));
    scale_ = std::pow(static_cast<double>(dim / kHeads), -0.5);
  }
  torch::Tensor forward(const torch::Tensor& x, int64_t h, int64_t w) {
    const auto b = x.size(0), n = x.size(1), c = x.size(2);
    auto t = qkv(x).reshape({b, n, 3, kHeads, c / kHeads}).permute({2, 0, 3, 1, 4});
    auto q = t[0], k = t[1], v = t[2];
    auto factor = torch::matmul(q, torch::matmul(torch::softmax(k, 2).transpose(-1, -2), v));
    auto y = scale_ * factor + crpe->forward(q, v, h, w);
    return proj(y.transpose(1, 2).reshape({b, n, c}));
  }
  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  ConvRelPosEnc crpe;  // shared with the model, not registered here
  double scale_;
};
TORCH_MODULE(FactorAttn);

struct SerialBlockImpl : torch::nn::Module {
  SerialBlockImpl(int dim, int mlp_ratio, ConvPosEnc shared_cpe, ConvRelPosEnc shared_crpe)
      : cpe(std::move(shared_cpe)) {
    norm1 = register_module("norm1", layer_norm(dim, kEps));
    factoratt_crpe = register_module("factoratt_crpe", FactorAttn(dim, std::move(shared_crpe)));
    norm2 = register_module("norm2", layer_norm(dim, kEps));
    mlp = register_module("mlp", Mlp(dim, dim * mlp_ratio));
  }
  torch::Tensor forward(torch::Tensor x, int64_t h, int64_t w) {
    x = cpe->forward(x, h, w);
    x = x + factoratt_crpe->forward(norm1(x), h, w);
    return x + mlp(norm2(x));
  }
  ConvPosEnc cpe;  // shared
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  FactorAttn factoratt_crpe{nullptr};
  Mlp mlp{nullptr};
};
TORCH_MODULE(SerialBlock);

struct PatchEmbedImpl : torch::nn::Module {
  PatchEmbedImpl(int in, int dim, int patch) {
    proj = register_module("proj", conv(in, dim, patch, patch, 0, 1, true));
    norm = register_module("norm", layer_norm(dim));
  }
  torch::Tensor forward(const torch::Tensor& x) { return norm(proj(x).flatten(2).transpose(1, 2)); }
  torch::nn::Conv2d proj{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(PatchEmbed);

struct CoatLiteMini : BackboneImpl {
  CoatLiteMini() {
    const int dims[] = {64, 128, 320, 512};
    const int ratios[] = {8, 8, 4, 4};
    for (int i = 0; i < 4; ++i) {
      const auto k = std::to_string(i + 1);
      cls.push_back(register_parameter("cls_token" + k, torch::zeros({1, 1, dims[i]})));
      trunc_normal(cls.back(), 0.02);
      embeds.push_back(register_module("patch_embed" + k, PatchEmbed(i == 0 ? 3 : dims[i - 1], dims[i], i == 0 ? 4 : 2)));
      cpes.push_back(register_module("cpe" + k, ConvPosEnc(dims[i])));
      crpes.push_back(register_module("crpe" + k, ConvRelPosEnc(dims[i])));
    }
    for (int i = 0; i < 4; ++i) {
      auto list = register_module("serial_blocks" + std::to_string(i + 1), torch::nn::ModuleList());
      std::vector<SerialBlock> stage;
      for (int j = 0; j < 2; ++j) {
        auto block = SerialBlock(dims[i], ratios[i], cpes[i], crpes[i]);
        list->push_back(block);
        stage.push_back(block);
      }
      blocks.push_back(stage);
    }
    norm4 = register_module("norm4", layer_norm(512, kEps));
  }

  torch::Tensor forward(torch::Tensor x) override {
    const auto b = x.size(0);
    for (std::size_t i = 0; i < 4; ++i) {
      const int64_t stride = i == 0 ? 4 : 2;
      const int64_t h = x.size(2) / stride, w = x.size(3) / stride;
      x = embeds[i]->forward(x);
      x = torch::cat({cls[i].expand({b, -1, -1}), x}, 1);
      for (auto& blk : blocks[i]) x = blk->forward(x, h, w);
      if (i < 3) {
        using torch::indexing::Slice;
        x = x.index({Slice(), Slice(1, torch::indexing::None)}).reshape({b, h, w, -1}).permute({0, 3, 1, 2}).contiguous();
      } else {
        x = norm4(x).select(1, 0);
      }
    }
    return x;
  }

  std::vector<torch::Tensor> cls;
  std::vector<PatchEmbed> embeds;
  std::vector<ConvPosEnc> cpes;
  std::vector<ConvRelPosEnc> crpes;
  std::vector<std::vector<SerialBlock>> blocks;
  torch::nn::LayerNorm norm4{nullptr};
};

}  // namespace

std::shared_ptr<BackboneImpl> make_coat_lite_mini() { return std::make_shared<CoatLiteMini>(); }

}  // namespace carid::nets
