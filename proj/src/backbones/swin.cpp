#include "layers.hpp"

#include <cmath>

namespace carid::nets {

namespace {

// Index into a (2w-1)^2 bias table for a window of size `eff` <= w, using
// the same relative offsets as the full window.
torch::Tensor relative_index(int64_t w, int64_t eff) {
  auto coords = torch::stack(torch::meshgrid({torch::arange(eff), torch::arange(eff)}, "ij")).flatten(1);
  auto rel = (coords.unsqueeze(2) - coords.unsqueeze(1)).permute({1, 2, 0}).contiguous();
  auto dy = rel.select(2, 0) + (w - 1);
  auto dx = rel.select(2, 1) + (w - 1);
  return (dy * (2 * w - 1) + dx).view(-1);
}

torch::Tensor window_partition(const torch::Tensor& x, int64_t w) {
  const auto b = x.size(0), h = x.size(1), wd = x.size(2), c = x.size(3);
  return x.view({b, h / w, w, wd / w, w, c}).permute({0, 1, 3, 2, 4, 5}).contiguous().view({-1, w * w, c});
}

torch::Tensor window_reverse(const torch::Tensor& windows, int64_t w, int64_t h, int64_t wd) {
  const auto c = windows.size(-1);
  auto x = windows.view({-1, h / w, wd / w, w, w, c});
  return x.permute({0, 1, 3, 2, 4, 5}).contiguous().view({-1, h, wd, c});
}

struct WindowAttentionImpl : torch::nn::Module {
  WindowAttentionImpl(int dim, int heads, int window) : heads_(heads), window_(window) {
    relative_position_bias_table = register_parameter(
        "relative_position_bias_table", torch::zeros({(2 * window - 1) * (2 * window - 1), heads}));
    trunc_normal(relative_position_bias_table, 0.02);
    qkv = register_module("qkv", linear(dim, dim * 3));
    proj = register_module("proj", linear(dim, dim));
    scale_ = std::pow(static_cast<double>(dim / heads), -0.5);
  }

  torch::Tensor forward(const torch::Tensor& x, int64_t eff, const torch::Tensor& mask) {
    const auto b = x.size(0), n = x.size(1), c = x.size(2);
    auto t = qkv(x).reshape({b, n, 3, heads_, -1}).permute({2, 0, 3, 1, 4});
    auto q = t[0] * scale_, k = t[1], v = t[2];
    auto attn = torch::matmul(q, k.transpose(-2, -1));
    auto bias = relative_position_bias_table.index_select(0, relative_index(window_, eff))
                    .view({n, n, -1})
                    .permute({2, 0, 1});
    attn = attn + bias.unsqueeze(0);
    if (mask.defined()) {
      const auto nw = mask.size(0);
      attn = attn.view({-1, nw, heads_, n, n}) + mask.unsqueeze(1).unsqueeze(0);
      attn = attn.view({-1, heads_, n, n});
    }
    attn = torch::softmax(attn, -1);
    return proj(torch::matmul(attn, v).transpose(1, 2).reshape({b, n, c}));
  }

  torch::Tensor relative_position_bias_table;
  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  int64_t heads_;
  int64_t window_;
  double scale_;
};
TORCH_MODULE(WindowAttention);

struct BlockImpl : torch::nn::Module {
  BlockImpl(int dim, int heads, int window, bool shifted) : window_(window), shifted_(shifted) {
    norm1 = register_module("norm1", layer_norm(dim));
    attn = register_module("attn", WindowAttention(dim, heads, window));
    norm2 = register_module("norm2", layer_norm(dim));
    mlp = register_module("mlp", Mlp(dim, dim * 4));
  }

  torch::Tensor mask(int64_t hp, int64_t wp, int64_t w, int64_t s) {
    auto img = torch::zeros({1, hp, wp, 1});
    const int64_t hs[4] = {0, hp - w, hp - s, hp};
    const int64_t ws[4] = {0, wp - w, wp - s, wp};
    float cnt = 0;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        using torch::indexing::Slice;
        img.index_put_({Slice(), Slice(hs[i], hs[i + 1]), Slice(ws[j], ws[j + 1]), Slice()}, cnt);
        cnt += 1;
      }
    }
    auto mw = window_partition(img, w).view({-1, w * w});
    auto m = mw.unsqueeze(1) - mw.unsqueeze(2);
    return torch::where(m != 0, torch::full_like(m, -100.0), torch::zeros_like(m));
  }

  torch::Tensor forward(torch::Tensor x) {
    const auto b = x.size(0), h = x.size(1), wd = x.size(2), c = x.size(3);
    const int64_t w = std::min<int64_t>({window_, h, wd});
    const int64_t s = (shifted_ && std::min(h, wd) > window_) ? w / 2 : 0;

    auto y = norm1(x);
    if (s) y = torch::roll(y, {-s, -s}, {1, 2});
    const int64_t ph = (w - h % w) % w, pw = (w - wd % w) % w;
    y = F::pad(y, F::PadFuncOptions({0, 0, 0, pw, 0, ph}));
    const int64_t hp = h + ph, wp = wd + pw;
    torch::Tensor m;
    if (s) m = mask(hp, wp, w, s).to(y.dtype());
    auto windows = attn->forward(window_partition(y, w), w, m);
    y = window_reverse(windows.view({-1, w * w, c}), w, hp, wp);
    using torch::indexing::Slice;
    y = y.index({Slice(), Slice(0, h), Slice(0, wd), Slice()}).contiguous();
    if (s) y = torch::roll(y, {s, s}, {1, 2});
    x = x + y;
    x = x.reshape({b, -1, c});
    x = x + mlp(norm2(x));
    return x.reshape({b, h, wd, c});
  }

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  WindowAttention attn{nullptr};
  Mlp mlp{nullptr};
  int64_t window_;
  bool shifted_;
};
TORCH_MODULE(Block);

struct PatchMergingImpl : torch::nn::Module {
  explicit PatchMergingImpl(int dim) {
    norm = register_module("norm", layer_norm(4 * dim));
    reduction = register_module("reduction", linear(4 * dim, 2 * dim, false));
  }
  torch::Tensor forward(torch::Tensor x) {
    auto b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
    x = F::pad(x, F::PadFuncOptions({0, 0, 0, w % 2, 0, h % 2}));
    h += h % 2;
    w += w % 2;
    x = x.reshape({b, h / 2, 2, w / 2, 2, c}).permute({0, 1, 3, 4, 2, 5}).flatten(3);
    return reduction(norm(x));
  }
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear reduction{nullptr};
};
TORCH_MODULE(PatchMerging);

struct StageImpl : torch::nn::Module {
  StageImpl(int in_dim, int dim, int depth, int heads, int window, bool downsample_first) {
    if (downsample_first) downsample = register_module("downsample", PatchMerging(in_dim));
    blocks = register_module("blocks", torch::nn::Sequential());
    for (int i = 0; i < depth; ++i) blocks->push_back(Block(dim, heads, window, i % 2 == 1));
  }
  torch::Tensor forward(torch::Tensor x) {
    if (downsample) x = downsample(x);
    return blocks->forward(x);
  }
  PatchMerging downsample{nullptr};
  torch::nn::Sequential blocks{nullptr};
};
TORCH_MODULE(Stage);

struct PatchEmbedImpl : torch::nn::Module {
  PatchEmbedImpl() {
    proj = register_module("proj", conv(3, 96, 4, 4, 0, 1, true));
    norm = register_module("norm", layer_norm(96));
  }
  torch::Tensor forward(const torch::Tensor& x) { return norm(proj(x).permute({0, 2, 3, 1})); }
  torch::nn::Conv2d proj{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(PatchEmbed);

struct SwinS3Tiny : BackboneImpl {
  SwinS3Tiny() {
    patch_embed = register_module("patch_embed", PatchEmbed());
    const int depths[] = {2, 2, 6, 2};
    const int heads[] = {3, 6, 12, 24};
    const int windows[] = {7, 7, 14, 7};
    layers = register_module("layers", torch::nn::ModuleList());
    int dim = 96;
    for (int i = 0; i < 4; ++i) {
      const int out = i == 0 ? dim : dim * 2;
      auto stage = Stage(dim, out, depths[i], heads[i], windows[i], i > 0);
      layers->push_back(stage);
      stage_list.push_back(stage);
      dim = out;
    }
    norm = register_module("norm", layer_norm(dim));
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = patch_embed(x);
    for (auto& s : stage_list) x = s->forward(x);
    return norm(x).mean({1, 2});
  }

  PatchEmbed patch_embed{nullptr};
  torch::nn::ModuleList layers{nullptr};
  std::vector<Stage> stage_list;
  torch::nn::LayerNorm norm{nullptr};
};

}  // namespace

std::shared_ptr<BackboneImpl> make_swin_s3_tiny() { return std::make_shared<SwinS3Tiny>(); }

}  // namespace carid::nets
