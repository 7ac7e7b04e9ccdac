"""Accuracy, part IoU, color sparsity and hue-robustness evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
import torch

from .data import apply_train_augmentations, hue_perturb
from .masks import resize_masks
from .model import LucidPPN, color_responses, to_tensor

PROBE_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)


def probe_colors() -> np.ndarray:
    """The 5 x 5 x 5 RGB grid, endpoints included."""
    return np.array(list(product(PROBE_LEVELS, repeat=3)), dtype=np.float32)


@dataclass
class MetricReport:
    accuracy: float
    shapetex_accuracy: float
    mean_iou: float | None = None
    color_sparsity: float | None = None
    hue_accuracy: float | None = None
    shapetex_hue_accuracy: float | None = None
    per_class: list = field(default_factory=list)

    def to_json(self) -> str:
        def r(v):
            return None if v is None else round(float(v), 6)

        d = {k: (r(v) if not isinstance(v, list) else v) for k, v in asdict(self).items()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def predict(model: LucidPPN, images, batch_size: int = 128):
    """Run the model on a list of H x W x 3 images; returns numpy outputs by field.

    Images not at the model's input size are resized as in evaluation mode.
    """
    model.eval()
    size = model.image_size
    images = [p if p.shape[:2] == (size, size)
              else apply_train_augmentations(p, None, size, train=False) for p in images]
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out = model.forward_rgb(to_tensor(images[start:start + batch_size]))
            chunks.append({k: v.numpy() for k, v in vars(out).items()})
    return {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0]}


def accuracy_from_scores(scores: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def accuracy(model: LucidPPN, dataset, branch: str = "full") -> float:
    """Top-1 accuracy from argmax of y_hat (``full``) or of p_s (``shapetex``)."""
    if not dataset:
        raise ValueError("empty dataset")
    out = predict(model, [s.pixels for s in dataset])
    key = {"full": "y_hat", "shapetex": "p_s"}[branch]
    return accuracy_from_scores(out[key], [s.label for s in dataset])


def part_iou_from_maps(maps: np.ndarray, masks: np.ndarray) -> float:
    """Mean IoU between thresholded prototype maps and argmax part regions.

    maps: N x K x H x W true-class ShapeTexNet maps; masks: N x (K+1) x H x W.
    A cell is predicted when its map value is at least 0.5; empty vs empty counts as 1.
    """
    if maps.shape[-2:] != masks.shape[-2:] or maps.shape[1] + 1 != masks.shape[1]:
        raise ValueError(f"resolution mismatch: {maps.shape} vs {masks.shape}")
    K = maps.shape[1]
    pred = maps >= 0.5
    region = masks.argmax(1)[:, None] == np.arange(K)[None, :, None, None]
    inter = (pred & region).sum((-2, -1))
    union = (pred | region).sum((-2, -1))
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return float(iou.mean(1).mean())


def part_iou(model: LucidPPN, dataset, masks) -> float:
    out = predict(model, [s.pixels for s in dataset])
    z_s = out["z_s"]
    h = z_s.shape[-1]
    labels = np.array([s.label for s in dataset])
    maps = z_s[np.arange(len(dataset)), :, labels]
    resized = np.stack([resize_masks(masks[s.id], h, h) for s in dataset])
    return part_iou_from_maps(maps, resized)


def sparsity_from_responses(responses: np.ndarray) -> float:
    """responses: P x K x M ColorNet resemblances to P probe colors."""
    return float((responses < 0.5).mean(0).mean() * 100.0)


def color_sparsity(model) -> float:
    """Percent of probe colors with ColorNet resemblance below 0.5, averaged over prototypes."""
    return sparsity_from_responses(color_responses(model, probe_colors()))


def hue_angles(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 360.0, size=n)


def hue_robustness(model: LucidPPN, dataset, seed: int, branch: str = "full",
                   angles=None):
    """(accuracy on originals, accuracy after one random hue rotation per image)."""
    if angles is None:
        angles = hue_angles(len(dataset), seed)
    perturbed = [s.with_pixels(hue_perturb(s.pixels, float(a)))
                 for s, a in zip(dataset, angles)]
    return accuracy(model, dataset, branch), accuracy(model, perturbed, branch)


def per_class_accuracy(scores: np.ndarray, labels, num_classes: int) -> list:
    labels = np.asarray(labels)
    pred = scores.argmax(1)
    rows = []
    for m in range(num_classes):
        sel = labels == m
        acc = float((pred[sel] == m).mean()) if sel.any() else None
        rows.append({"class": m, "n": int(sel.sum()),
                     "accuracy": None if acc is None else round(acc, 6)})
    return rows


def evaluate(model: LucidPPN, dataset, masks=None, hue_seed: int | None = None) -> MetricReport:
    out = predict(model, [s.pixels for s in dataset])
    labels = [s.label for s in dataset]
    report = MetricReport(
        accuracy=accuracy_from_scores(out["y_hat"], labels),
        shapetex_accuracy=accuracy_from_scores(out["p_s"], labels),
        color_sparsity=color_sparsity(model),
        per_class=per_class_accuracy(out["y_hat"], labels, model.M),
    )
    if masks is not None:
        report.mean_iou = part_iou(model, dataset, masks)
    if hue_seed is not None:
        _, report.hue_accuracy = hue_robustness(model, dataset, hue_seed)
        _, report.shapetex_hue_accuracy = hue_robustness(model, dataset, hue_seed,
                                                         branch="shapetex")
    return report
