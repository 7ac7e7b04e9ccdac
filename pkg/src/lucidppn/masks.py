"""Per-image part segmentation masks (K object parts + background, last)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

MAGIC = b"LPPM"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
SIMPLEX_TOL = 1e-5


class MaskFormatError(ValueError):
    """Base class for unreadable or invalid mask files."""


class MaskHeaderError(MaskFormatError):
    pass


class MaskSizeError(MaskFormatError):
    pass


class MaskSimplexError(MaskFormatError):
    pass


class UnknownDatasetError(KeyError):
    pass


def check_simplex(maps: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if maps.ndim != 3 or maps.shape[0] < 2:
        raise MaskSizeError(f"expected (K+1) x H x W maps, got shape {maps.shape}")
    if not np.all(np.isfinite(maps)):
        raise MaskSimplexError("non-finite mask values")
    if maps.min() < -tol or maps.max() > 1 + tol:
        raise MaskSimplexError("mask values outside [0, 1]")
    err = np.abs(maps.sum(0, dtype=np.float64) - 1.0).max()
    if err > tol:
        raise MaskSimplexError(f"per-pixel part sums deviate from 1 by {err:.3g}")


def disco_attention(z: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Soft part assignment of a D x H x W embedding map to K+1 part vectors.

    t[k, i, j] = softmax_k(-||z[:, i, j] - q[k]||^2)
    """
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if z.ndim != 3 or q.ndim != 2 or z.shape[0] != q.shape[1]:
        raise ValueError(f"dimension mismatch: z {z.shape}, q {q.shape}")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(q))):
        raise ValueError("non-finite embeddings")
    diff = z[None] - q[:, :, None, None]
    logits = -np.einsum("kdhw,kdhw->khw", diff, diff)
    logits -= logits.max(0, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(0, keepdims=True)


def save_masks(maps: np.ndarray, path) -> None:
    maps = np.asarray(maps, dtype="<f4")
    check_simplex(maps)
    parts, h, w = maps.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, parts, h, w))
        f.write(np.ascontiguousarray(maps).tobytes())


def load_masks(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MaskHeaderError(f"{path}: truncated header")
    magic, version, parts, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MaskHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MaskHeaderError(f"{path}: unsupported version {version}")
    if parts < 2 or h == 0 or w == 0:
        raise MaskHeaderError(f"{path}: bad dimensions {parts}x{h}x{w}")
    body = data[_HEADER.size:]
    if len(body) != 4 * parts * h * w:
        raise MaskSizeError(
            f"{path}: expected {parts * h * w} float32 values, got {len(body) / 4:g}")
    maps = np.frombuffer(body, dtype="<f4").reshape(parts, h, w).astype(np.float32)
    check_simplex(maps)
    return maps


def mask_path(mask_dir, image_id: str) -> Path:
    return Path(mask_dir) / f"{image_id}.lppm"


def load_mask_dir(mask_dir, ids) -> dict[str, np.ndarray]:
    mask_dir = Path(mask_dir)
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"masks not found: {mask_dir}")
    out = {}
    for i in ids:
        p = mask_path(mask_dir, i)
        if not p.exists():
            raise FileNotFoundError(f"masks not found for image {i!r}: {p}")
        out[i] = load_masks(p)
    return out


def resize_masks(maps, h: int, w: int):
    """Bilinear resize of every map followed by per-pixel renormalization.

    Accepts a single (K+1) x H x W array or a batched torch tensor B x (K+1) x H x W.
    """
    if h <= 0 or w <= 0:
        raise ValueError("target size must be positive")
    single = isinstance(maps, np.ndarray)
    t = torch.from_numpy(maps)[None] if single else maps
    if tuple(t.shape[-2:]) != (h, w):
        t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False,
                          antialias=True)
        t = t.clamp_min(0)
        t = t / t.sum(1, keepdim=True).clamp_min(1e-12)
    return t[0].numpy() if single else t


_ORACLES: dict[str, dict[str, np.ndarray]] = {}


def register_oracle(dataset_id: str, masks: dict[str, np.ndarray]) -> None:
    _ORACLES[dataset_id] = masks


def oracle_masks(dataset_id: str) -> dict[str, np.ndarray]:
    """Rendered part supports of a synthetic dataset, keyed by image id."""
    try:
        return _ORACLES[dataset_id]
    except KeyError:
        raise UnknownDatasetError(dataset_id) from None


def synthetic_with_oracle(spec):
    """Generate a synthetic dataset and register its ground-truth masks."""
    from .data import generate_synthetic

    samples, masks = generate_synthetic(spec)
    register_oracle(spec.dataset_id(), masks)
    return samples, masks
