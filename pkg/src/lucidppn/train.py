"""Joint training of both branches and checkpoint serialization."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import apply_train_augmentations
from .losses import LossWeights, total_loss
from .masks import resize_masks
from .model import COLORNET_WIDTHS, BackboneConfig, LucidPPN, to_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    num_parts: int = 2
    num_classes: int = 4
    epochs: int = 40
    batch_size: int = 64
    lr_shapetex: float = 0.002
    lr_shapetex_final: float = 0.0002
    lr_decay_epoch: int = 15
    lr_colornet: float = 0.002
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    freeze_epochs: int = 15
    color_delay: int = 0
    alpha_d: float = 1.4
    alpha_s: float = 1.0
    alpha_a: float = 1.0
    image_size: int = 64
    backbone: str = "desk_cnn"
    backbone_channels: int = 64
    color_widths: tuple = COLORNET_WIDTHS
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.color_widths = tuple(self.color_widths)
        self.validate()

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.color_delay < self.epochs:
            raise ValueError("color_delay must be in [0, epochs)")
        if not 0 <= self.freeze_epochs <= self.epochs:
            raise ValueError("freeze_epochs must be in [0, epochs]")
        if self.num_parts < 1 or self.num_classes < 1:
            raise ValueError("num_parts and num_classes must be positive")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_d, self.alpha_s, self.alpha_a)

    @property
    def total_epochs(self) -> int:
        # a delayed ColorNet still gets the full epoch budget
        return self.epochs + self.color_delay

    def shapetex_lr(self, epoch: int) -> float:
        return self.lr_shapetex if epoch < self.lr_decay_epoch else self.lr_shapetex_final

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["color_widths"] = list(self.color_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def build_model(config: TrainConfig) -> LucidPPN:
    return LucidPPN(
        config.num_parts,
        config.num_classes,
        image_size=config.image_size,
        backbone=BackboneConfig(config.backbone, config.backbone_channels),
        color_widths=config.color_widths,
    )


@dataclass
class Checkpoint:
    params: dict  # name -> np.ndarray
    config: TrainConfig
    epoch: int
    rng_digest: str = ""
    history: list = field(default_factory=list)

    def model(self) -> LucidPPN:
        net = build_model(self.config)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        net.load_state_dict(state)
        net.eval()
        return net


class TrainingDivergedError(RuntimeError):
    pass


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def make_batch(samples, masks, size, feature_size, rng, train):
    images, mask_list = [], []
    for s in samples:
        m = masks[s.id] if masks is not None else None
        out = apply_train_augmentations(s.pixels, rng, size, masks=m, train=train)
        if m is None:
            images.append(out)
        else:
            images.append(out[0])
            mask_list.append(out[1])
    rgb = to_tensor(images)
    y = torch.tensor([s.label for s in samples], dtype=torch.long)
    if masks is None:
        return rgb, None, y
    t = resize_masks(torch.from_numpy(np.stack(mask_list)), feature_size, feature_size)
    return rgb, t, y


def _state_arrays(model) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def _rng_digest(rng: np.random.Generator) -> str:
    h = hashlib.sha256(json.dumps(rng.bit_generator.state, sort_keys=True).encode())
    h.update(torch.get_rng_state().numpy().tobytes())
    return h.hexdigest()


def _set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


def train(config: TrainConfig, samples, masks, log_file=None, on_epoch=None) -> Checkpoint:
    """Optimize both branches; returns the final checkpoint.

    ``log_file`` receives one ``step,l_d,l_s,l_a,total`` line per step.
    ``on_epoch(epoch, model)`` is called after every epoch (used for snapshots).
    """
    missing = [s.id for s in samples if s.id not in masks]
    if missing:
        raise KeyError(f"masks missing for {len(missing)} images, e.g. {missing[0]!r}")
    set_determinism(config.seed)
    rng = np.random.default_rng(config.seed)
    model = build_model(config)
    backbone = list(model.backbone_parameters())
    head = list(model.head_parameters())
    color = list(model.colornet.parameters())
    opt = torch.optim.AdamW(
        [
            {"params": backbone, "lr": config.lr_shapetex},
            {"params": head, "lr": config.lr_shapetex},
            {"params": color, "lr": config.lr_colornet},
        ],
        betas=config.betas, eps=config.adam_eps, weight_decay=config.weight_decay,
    )
    weights = config.weights
    n = len(samples)
    step = 0
    history = []
    if log_file is not None:
        log_file.write("step,l_d,l_s,l_a,total\n")
    for epoch in range(config.total_epochs):
        lr_s = config.shapetex_lr(epoch)
        opt.param_groups[0]["lr"] = lr_s
        opt.param_groups[1]["lr"] = lr_s
        _set_trainable(backbone, epoch >= config.freeze_epochs)
        _set_trainable(color, epoch >= config.color_delay)
        model.train()
        order = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            rgb, t, y = make_batch(batch, masks, config.image_size, model.feature_size,
                                   rng, config.augment)
            out = model.forward_rgb(rgb)
            losses = total_loss(out, t, y, weights)
            if not torch.isfinite(losses.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}: {losses.as_floats()}")
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            opt.step()
            vals = losses.as_floats()
            sums += [vals[k] * len(batch) for k in ("l_d", "l_s", "l_a", "total")]
            if log_file is not None:
                log_file.write(f"{step},{vals['l_d']:.6f},{vals['l_s']:.6f},"
                               f"{vals['l_a']:.6f},{vals['total']:.6f}\n")
            step += 1
        means = dict(zip(("l_d", "l_s", "l_a", "total"), (sums / n).tolist()))
        history.append({"epoch": epoch, **means})
        log.info("epoch %d lr_s=%g total=%.4f", epoch, lr_s, means["total"])
        if on_epoch is not None:
            on_epoch(epoch, model)
    _set_trainable(model.parameters(), True)
    model.eval()
    return Checkpoint(_state_arrays(model), config, config.total_epochs,
                      _rng_digest(rng), history)


# -- checkpoint files ------------------------------------------------------------

CKPT_MAGIC = b"LPCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blobs, tensors, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    body = b"".join(blobs)
    meta = {
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.hash(),
        "epoch": ckpt.epoch,
        "rng_digest": ckpt.rng_digest,
        "history": ckpt.history,
        "tensors": tensors,
        "sha256": hashlib.sha256(body).hexdigest(),
    }
    header = json.dumps(meta, sort_keys=True).encode()
    return _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + body


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointCorruptError(f"{path}: truncated header")
    magic, version, hlen = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CKPT_VERSION}")
    start = _CKPT_HEADER.size
    if len(data) < start + hlen:
        raise CheckpointCorruptError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"{path}: unreadable metadata ({e})") from None
    body = data[start + hlen:]
    if hashlib.sha256(body).hexdigest() != meta.get("sha256"):
        raise CheckpointCorruptError(f"{path}: parameter data checksum mismatch")
    params = {}
    for t in meta["tensors"]:
        raw = body[t["offset"]:t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(raw, dtype="<" + t["dtype"]).reshape(t["shape"]).copy()
    config = TrainConfig.from_dict(meta["config"])
    if config.hash() != meta["config_hash"]:
        raise CheckpointCorruptError(f"{path}: config hash mismatch")
    return Checkpoint(params, config, meta["epoch"], meta["rng_digest"], meta["history"])


def write_manifest(ckpt: Checkpoint, path, metrics: dict | None = None,
                   extra: dict | None = None) -> None:
    manifest = {"config_hash": ckpt.config.hash(), "epoch": ckpt.epoch,
                "metrics": metrics or {}}
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
