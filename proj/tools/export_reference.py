#!/usr/bin/env python3
"""Export upstream backbone weights and reference pooled features.

Writes, per backbone, into OUT_DIR:
  <name>.pth      plain dict of the upstream state_dict (loadable by carid)
  <name>.ref.pth  {"input": (2,3,H,W), "features": (2,D)} computed in eval mode

By default weights are randomly initialised (with perturbed batch-norm
statistics so normalisation layers are exercised). Pass --pretrained to
download the published checkpoints instead.
"""
import argparse
import os

import torch

SIZES = {
    "resnet50": 224,
    "densenet161": 224,
    "efficientnetv2_b2": 288,
    "mobilevit_s": 256,
    "swin_s3_tiny": 224,
    "coat_lite_mini": 224,
}


def create(name, pretrained):
    import timm
    import torchvision

    if name == "resnet50":
        m = torchvision.models.resnet50(weights="DEFAULT" if pretrained else None)
        m.fc = torch.nn.Identity()
        return m, m
    if name == "densenet161":
        m = torchvision.models.densenet161(weights="DEFAULT" if pretrained else None)
        m.classifier = torch.nn.Identity()
        return m, m
    upstream = {
        "efficientnetv2_b2": "tf_efficientnetv2_b2",
        "mobilevit_s": "mobilevit_s",
        "swin_s3_tiny": "swin_s3_tiny_224",
        "coat_lite_mini": "coat_lite_mini",
    }[name]
    m = timm.create_model(upstream, pretrained=pretrained)

    class Pooled(torch.nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self, x):
            return self.inner.forward_head(self.inner.forward_features(x), pre_logits=True)

    return m, Pooled(m)


def perturb(model, gen):
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm):
                mod.running_mean.copy_(torch.randn(mod.running_mean.shape, generator=gen) * 0.1)
                mod.running_var.copy_(torch.rand(mod.running_var.shape, generator=gen) * 0.5 + 0.75)
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen) * 0.5 + 0.75)
                mod.bias.copy_(torch.randn(mod.bias.shape, generator=gen) * 0.1)


def main():
    try:
        import timm  # noqa: F401
        import torchvision  # noqa: F401
    except ImportError as e:
        print("skipping reference export:", e)
        return
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--only", nargs="*", default=list(SIZES))
    ap.add_argument("--pretrained", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    for name in args.only:
        torch.manual_seed(args.seed)
        gen = torch.Generator().manual_seed(args.seed + 1)
        model, pooled = create(name, args.pretrained)
        if not args.pretrained:
            perturb(model, gen)
        model.eval()
        size = SIZES[name]
        x = torch.randn(2, 3, size, size, generator=gen)
        with torch.no_grad():
            feats = pooled(x)
        torch.save(dict(model.state_dict()), os.path.join(args.out_dir, name + ".pth"))
        torch.save({"input": x, "features": feats}, os.path.join(args.out_dir, name + ".ref.pth"))
        print(name, tuple(feats.shape))


if __name__ == "__main__":
    main()
