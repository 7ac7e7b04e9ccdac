"""Two-branch prototypical-parts network: grayscale shape/texture x per-pixel color."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import GRAY_MEAN, GRAY_STD

COLORNET_WIDTHS = (20, 50, 150, 200, 600)


@dataclass
class BackboneConfig:
    variant: str = "desk_cnn"
    channels: int = 64
    pretrained: bool = False


@dataclass
class Outputs:
    z_s: torch.Tensor  # B x K x M x H x W
    r_s: torch.Tensor  # B x K x M
    p_s: torch.Tensor  # B x M
    z_c: torch.Tensor
    r_c: torch.Tensor
    z_a: torch.Tensor
    r_a: torch.Tensor
    y_hat: torch.Tensor  # B x M


def global_max(z: torch.Tensor) -> torch.Tensor:
    return z.flatten(-2).amax(-1)


class DeskBackbone(nn.Module):
    """Four conv-norm-GELU blocks; the first three halve the resolution."""

    def __init__(self, channels: int = 64, in_channels: int = 3):
        super().__init__()
        layers = []
        c_in = in_channels
        for stride in (2, 2, 2, 1):
            layers += [
                nn.Conv2d(c_in, channels, 3, stride=stride, padding=1),
                nn.GroupNorm(4, channels),
                nn.GELU(),
            ]
            c_in = channels
        self.body = nn.Sequential(*layers)
        self.out_channels = channels

    def forward(self, x):
        return self.body(x)


def convnext_tiny_backbone(pretrained: bool = False) -> nn.Module:
    """ConvNeXt-tiny features with the last two downsampling layers at stride 1.

    224 x 224 input gives a 768 x 28 x 28 map.
    """
    from torchvision.models import ConvNeXt_Tiny_Weights, convnext_tiny

    net = convnext_tiny(weights=ConvNeXt_Tiny_Weights.DEFAULT if pretrained else None)
    features = net.features
    for idx in (4, 6):
        down = features[idx]
        conv = down[1]
        conv.stride = (1, 1)
        # keep spatial size with the 2x2 kernel
        features[idx] = nn.Sequential(down[0], nn.ZeroPad2d((0, 1, 0, 1)), conv)
    features.out_channels = 768
    return features


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.variant == "desk_cnn":
        return DeskBackbone(cfg.channels)
    if cfg.variant == "convnext_tiny_modified":
        return convnext_tiny_backbone(cfg.pretrained)
    raise ValueError(f"unknown backbone variant {cfg.variant!r}")


class ShapeTexNet(nn.Module):
    def __init__(self, num_parts: int, num_classes: int, backbone: nn.Module):
        super().__init__()
        self.K, self.M = num_parts, num_classes
        self.backbone = backbone
        self.proj = nn.Conv2d(backbone.out_channels, num_parts * num_classes, 1)

    def forward(self, x_s):
        feats = self.backbone(x_s)
        if feats.shape[1] != self.proj.in_channels:
            raise ValueError(
                f"backbone gives {feats.shape[1]} channels, projection expects "
                f"{self.proj.in_channels}")
        logits = self.proj(feats)
        b, _, h, w = logits.shape
        z_s = torch.sigmoid(logits.view(b, self.K, self.M, h, w))
        r_s = global_max(z_s)
        return z_s, r_s, r_s.mean(1)


class ColorNet(nn.Module):
    """Six 1x1 convolutions: every output pixel sees only its own input color."""

    def __init__(self, num_parts: int, num_classes: int, widths=COLORNET_WIDTHS):
        super().__init__()
        self.K, self.M = num_parts, num_classes
        chans = [3, *widths, num_parts * num_classes]
        layers = []
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(nn.Conv2d(a, b, 1))
            if i < len(chans) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, x_c):
        if x_c.shape[1] != 3:
            raise ValueError(f"ColorNet expects 3 input channels, got {x_c.shape[1]}")
        logits = self.net(x_c)
        b, _, h, w = logits.shape
        z_c = torch.sigmoid(logits.view(b, self.K, self.M, h, w))
        return z_c, global_max(z_c)


def fuse(z_s: torch.Tensor, z_c: torch.Tensor):
    """Elementwise fusion; returns (z_a, r_a, y_hat)."""
    if z_s.shape != z_c.shape:
        raise ValueError(f"shape mismatch: {tuple(z_s.shape)} vs {tuple(z_c.shape)}")
    z_a = z_s * z_c
    r_a = global_max(z_a)
    return z_a, r_a, r_a.mean(-2)


class LucidPPN(nn.Module):
    def __init__(self, num_parts: int, num_classes: int, image_size: int = 64,
                 backbone: BackboneConfig | None = None, color_widths=COLORNET_WIDTHS):
        super().__init__()
        self.K, self.M = num_parts, num_classes
        self.image_size = image_size
        self.shapetex = ShapeTexNet(num_parts, num_classes,
                                    build_backbone(backbone or BackboneConfig()))
        self.colornet = ColorNet(num_parts, num_classes, color_widths)
        with torch.no_grad():
            self.feature_size = self.shapetex.backbone(
                torch.zeros(1, 3, image_size, image_size)).shape[-1]

    def forward(self, x_s, x_c) -> Outputs:
        z_s, r_s, p_s = self.shapetex(x_s)
        z_c, r_c = self.colornet(x_c)
        z_a, r_a, y_hat = fuse(z_s, z_c)
        return Outputs(z_s, r_s, p_s, z_c, r_c, z_a, r_a, y_hat)

    def forward_rgb(self, rgb: torch.Tensor) -> Outputs:
        return self(*branch_inputs(rgb, self.feature_size))

    def backbone_parameters(self):
        return self.shapetex.backbone.parameters()

    def head_parameters(self):
        return self.shapetex.proj.parameters()


def branch_inputs(rgb: torch.Tensor, feature_size: int):
    """B x 3 x S x S RGB in [0, 1] -> (normalized grayscale, area-downscaled color)."""
    luma = torch.tensor([0.299, 0.587, 0.114], dtype=torch.float64)
    w = torch.einsum("bchw,c->bhw", rgb.double(), luma).to(rgb.dtype)
    x_s = ((w - GRAY_MEAN) / GRAY_STD).unsqueeze(1).expand(-1, 3, -1, -1)
    x_c = F.adaptive_avg_pool2d(rgb.double(), feature_size).to(rgb.dtype)
    return x_s.contiguous(), x_c


def to_tensor(images) -> torch.Tensor:
    """Stack H x W x 3 arrays (or ImageSamples) into a float32 B x 3 x H x W batch."""
    arrs = [getattr(im, "pixels", im) for im in images]
    return torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def resemblance_argmax(z: torch.Tensor | np.ndarray, k: int, m: int) -> tuple[int, int]:
    """Location of the max of one K x M x H x W prototype map; first in row-major order."""
    a = np.asarray(z[k, m].detach().cpu() if isinstance(z, torch.Tensor) else z[k, m])
    idx = int(np.argmax(a))
    return divmod(idx, a.shape[1])


def top_classes(y_hat, n: int) -> list[int]:
    y = np.asarray(y_hat.detach().cpu() if isinstance(y_hat, torch.Tensor) else y_hat)
    if not 0 < n <= len(y):
        raise ValueError(f"n must be in [1, {len(y)}]")
    order = sorted(range(len(y)), key=lambda m: (-float(y[m]), m))
    return order[:n]


def color_response(model: LucidPPN | ColorNet, color) -> np.ndarray:
    """K x M ColorNet resemblance to a uniform image of one RGB color."""
    net = model.colornet if isinstance(model, LucidPPN) else model
    probe = torch.as_tensor(np.asarray(color), dtype=torch.float32).view(1, 3, 1, 1)
    with torch.no_grad():
        _, r_c = net(probe)
    return r_c[0].numpy()


def color_responses(model: LucidPPN | ColorNet, colors) -> np.ndarray:
    """Batched :func:`color_response`: N x 3 colors -> N x K x M."""
    net = model.colornet if isinstance(model, LucidPPN) else model
    probe = torch.as_tensor(np.asarray(colors), dtype=torch.float32).view(-1, 3, 1, 1)
    with torch.no_grad():
        _, r_c = net(probe)
    return r_c.numpy()
