"""Binary cross-entropy terms of the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-7


@dataclass
class LossWeights:
    alpha_d: float = 1.4
    alpha_s: float = 1.0
    alpha_a: float = 1.0

    def __post_init__(self):
        for name in ("alpha_d", "alpha_s", "alpha_a"):
            v = float(getattr(self, name))
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    l_d: torch.Tensor
    l_s: torch.Tensor
    l_a: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_d", "l_s", "l_a", "total")}


def bce(u, v):
    u = torch.as_tensor(u, dtype=torch.get_default_dtype()) if not torch.is_tensor(u) else u
    v = torch.as_tensor(v, dtype=u.dtype)
    u = u.clamp(EPS, 1 - EPS)
    return -(v * torch.log(u) + (1 - v) * torch.log1p(-u))


def mbce(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Mean BCE over the last two (spatial) axes."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    return bce(u, v).mean((-2, -1))


def loss_correspondence(z_s: torch.Tensor, masks: torch.Tensor, y: torch.Tensor):
    """Align each true-class prototype map with its part mask.

    z_s: B x K x M x H x W, masks: B x (K+1) x H x W at model resolution,
    y: B labels. The background map (index K) is ignored.
    """
    B, K, M, H, W = z_s.shape
    if masks.shape[-2:] != (H, W):
        raise ValueError(
            f"masks at {tuple(masks.shape[-2:])} must be resized to {(H, W)} first")
    idx = y.view(B, 1, 1, 1, 1).expand(B, K, 1, H, W)
    maps = z_s.gather(2, idx).squeeze(2)
    return mbce(maps, masks[:, :K].to(z_s.dtype)).mean(1)


def _resemblance_bce(r: torch.Tensor, y: torch.Tensor):
    target = F.one_hot(y, r.shape[-1]).to(r.dtype).unsqueeze(-2).expand_as(r)
    return bce(r, target).mean((-2, -1))


def loss_shapetex(r_s: torch.Tensor, y: torch.Tensor):
    """BCE of every K x M ShapeTexNet resemblance against the one-hot label."""
    return _resemblance_bce(r_s, y)


def loss_aggregated(r_a: torch.Tensor, y: torch.Tensor):
    return _resemblance_bce(r_a, y)


def total_loss(out, masks, y, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the three terms, each averaged over the batch."""
    l_d = loss_correspondence(out.z_s, masks, y).mean()
    l_s = loss_shapetex(out.r_s, y).mean()
    l_a = loss_aggregated(out.r_a, y).mean()
    total = weights.alpha_d * l_d + weights.alpha_s * l_s + weights.alpha_a * l_a
    return LossBreakdown(l_d, l_s, l_a, total)
