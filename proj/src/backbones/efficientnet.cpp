#include "layers.hpp"

namespace carid::nets {

namespace {

constexpr double kEps = 1e-3;

// TF "SAME" padding: asymmetric, extra pixel on the bottom/right.
torch::Tensor pad_same(const torch::Tensor& x, int k, int s) {
  auto amount = [&](int64_t i) {
    const int64_t out = (i + s - 1) / s;
    return std::max<int64_t>((out - 1) * s + k - i, 0);
  };
  const int64_t ph = amount(x.size(2));
  const int64_t pw = amount(x.size(3));
  if (ph == 0 && pw == 0) return x;
  return F::pad(x, F::PadFuncOptions({pw / 2, pw - pw / 2, ph / 2, ph - ph / 2}));
}

// Stride-2 convs pad dynamically, stride-1 convs pad statically.
torch::nn::Conv2d tf_conv(int in, int out, int k, int stride, int groups = 1) {
  return conv(in, out, k, stride, stride == 1 ? (k - 1) / 2 : 0, groups);
}

torch::Tensor run(torch::nn::Conv2d& c, const torch::Tensor& x, int k, int stride) {
  return c(stride == 1 ? x : pad_same(x, k, stride));
}

struct ConvBnActImpl : torch::nn::Module {
  ConvBnActImpl(int in, int out, int stride, bool skip) : stride_(stride), skip_(skip && in == out && stride == 1) {
    conv_ = register_module("conv", tf_conv(in, out, 3, stride));
    bn1 = register_module("bn1", batch_norm(out, kEps));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::silu(bn1(run(conv_, x, 3, stride_)));
    return skip_ ? y + x : y;
  }
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr};
  int stride_;
  bool skip_;
};
TORCH_MODULE(ConvBnAct);

struct EdgeResidualImpl : torch::nn::Module {
  EdgeResidualImpl(int in, int out, int stride, int expand) : stride_(stride), skip_(in == out && stride == 1) {
    const int mid = in * expand;
    conv_exp = register_module("conv_exp", tf_conv(in, mid, 3, stride));
    bn1 = register_module("bn1", batch_norm(mid, kEps));
    conv_pwl = register_module("conv_pwl", conv(mid, out, 1));
    bn2 = register_module("bn2", batch_norm(out, kEps));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::silu(bn1(run(conv_exp, x, 3, stride_)));
    y = bn2(conv_pwl(y));
    return skip_ ? y + x : y;
  }
  torch::nn::Conv2d conv_exp{nullptr}, conv_pwl{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  int stride_;
  bool skip_;
};
TORCH_MODULE(EdgeResidual);

struct SqueezeExciteImpl : torch::nn::Module {
  SqueezeExciteImpl(int channels, int reduced) {
    conv_reduce = register_module("conv_reduce", conv(channels, reduced, 1, 1, 0, 1, true));
    conv_expand = register_module("conv_expand", conv(reduced, channels, 1, 1, 0, 1, true));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto s = x.mean({2, 3}, true);
    s = conv_expand(torch::silu(conv_reduce(s)));
    return x * torch::sigmoid(s);
  }
  torch::nn::Conv2d conv_reduce{nullptr}, conv_expand{nullptr};
};
TORCH_MODULE(SqueezeExcite);

struct InvertedResidualImpl : torch::nn::Module {
  InvertedResidualImpl(int in, int out, int stride, int expand)
      : stride_(stride), skip_(in == out && stride == 1) {
    const int mid = in * expand;
    conv_pw = register_module("conv_pw", conv(in, mid, 1));
    bn1 = register_module("bn1", batch_norm(mid, kEps));
    conv_dw = register_module("conv_dw", tf_conv(mid, mid, 3, stride, mid));
    bn2 = register_module("bn2", batch_norm(mid, kEps));
    se = register_module("se", SqueezeExcite(mid, in / 4));
    conv_pwl = register_module("conv_pwl", conv(mid, out, 1));
    bn3 = register_module("bn3", batch_norm(out, kEps));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::silu(bn1(conv_pw(x)));
    y = torch::silu(bn2(run(conv_dw, y, 3, stride_)));
    y = se(y);
    y = bn3(conv_pwl(y));
    return skip_ ? y + x : y;
  }
  torch::nn::Conv2d conv_pw{nullptr}, conv_dw{nullptr}, conv_pwl{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  SqueezeExcite se{nullptr};
  int stride_;
  bool skip_;
};
TORCH_MODULE(InvertedResidual);

struct EfficientNetV2B2 : BackboneImpl {
  EfficientNetV2B2() {
    conv_stem = register_module("conv_stem", tf_conv(3, 32, 3, 2));
    bn1 = register_module("bn1", batch_norm(32, kEps));

    struct Stage {
      char type;
      int repeats, out, stride, expand;
    };
    const Stage stages[] = {{'c', 2, 16, 1, 1},  {'e', 3, 32, 2, 4},  {'e', 3, 56, 2, 4},
                            {'i', 4, 104, 2, 4}, {'i', 6, 120, 1, 6}, {'i', 10, 208, 2, 6}};
    int in = 32;
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (const auto& st : stages) {
      torch::nn::Sequential seq;
      for (int r = 0; r < st.repeats; ++r) {
        const int stride = r == 0 ? st.stride : 1;
        if (st.type == 'c') {
          seq->push_back(ConvBnAct(in, st.out, stride, true));
        } else if (st.type == 'e') {
          seq->push_back(EdgeResidual(in, st.out, stride, st.expand));
        } else {
          seq->push_back(InvertedResidual(in, st.out, stride, st.expand));
        }
        in = st.out;
      }
      blocks->push_back(seq);
      stage_list.push_back(seq);
    }
    conv_head = register_module("conv_head", conv(in, 1408, 1));
    bn2 = register_module("bn2", batch_norm(1408, kEps));
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = torch::silu(bn1(run(conv_stem, x, 3, 2)));
    for (auto& s : stage_list) x = s->forward(x);
    x = torch::silu(bn2(conv_head(x)));
    return x.mean({2, 3});
  }

  torch::nn::Conv2d conv_stem{nullptr}, conv_head{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  std::vector<torch::nn::Sequential> stage_list;
};

}  // namespace

std::shared_ptr<BackboneImpl> make_efficientnetv2_b2() { return std::make_shared<EfficientNetV2B2>(); }

}  // namespace carid::nets
