"""Command-line entry point: ``lucidppn {synth,train,eval,explain}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import (SyntheticSpec, SyntheticSpecError, color_only_spec, export_folder,
                   generate_synthetic, load_folder, load_image, ImageSample, shape_only_spec)
from .masks import MaskFormatError, load_mask_dir, mask_path, register_oracle, save_masks
from .train import (CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train,
                    write_manifest)

log = logging.getLogger("lucidppn")

CHECKPOINT_NAME = "checkpoint.lpck"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    train_dir: str = ""
    test_dir: str = ""
    mask_source: str = "files"  # "files" | "oracle"
    mask_dir: str = ""
    synth_spec: str = ""  # synth.json, required for the oracle source
    out: str = "run"
    seed: int | None = None
    hue_seed: int = 7
    metrics: dict = field(default_factory=lambda: {"iou": True, "sparsity": True,
                                                   "hue": True})
    train: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        train_keys = {f.name for f in fields(TrainConfig)}
        top, nested = {}, dict(d.get("train", {}))
        for k, v in d.items():
            if k == "train":
                continue
            if k in known:
                top[k] = v
            elif k in train_keys:
                nested[k] = v
            else:
                raise UsageError(f"unknown config key {k!r}")
        cfg = cls(**top, train=nested)
        for name in ("train_dir", "test_dir", "mask_dir", "synth_spec"):
            value = getattr(cfg, name)
            if value and not Path(value).is_absolute():
                setattr(cfg, name, str(base / value))
        cfg.validate()
        return cfg

    def validate(self):
        if self.mask_source not in ("files", "oracle"):
            raise UsageError(f"mask_source must be 'files' or 'oracle', not {self.mask_source!r}")
        unknown = set(self.metrics) - {"iou", "sparsity", "hue"}
        if unknown:
            raise UsageError(f"unknown metric toggles {sorted(unknown)}")
        if not self.train_dir:
            raise UsageError("train_dir is required")
        if self.mask_source == "oracle" and not self.synth_spec:
            raise UsageError("mask_source 'oracle' needs synth_spec")
        if self.mask_source == "files" and not self.mask_dir:
            raise UsageError("mask_source 'files' needs mask_dir")


def resolve_seed(*candidates) -> int:
    for c in candidates:
        if c is not None:
            return int(c)
    env = os.environ.get("LUCID_SEED")
    return int(env) if env else 0


def load_spec(path) -> SyntheticSpec:
    return SyntheticSpec(**json.loads(Path(path).read_text())["spec"])


def oracle_masks_from_spec(path):
    spec = load_spec(path)
    _, masks = generate_synthetic(spec)
    register_oracle(spec.dataset_id(), masks)
    return masks


def load_run_masks(cfg: RunConfig, ids):
    if cfg.mask_source == "oracle":
        masks = oracle_masks_from_spec(cfg.synth_spec)
        missing = [i for i in ids if i not in masks]
        if missing:
            raise UsageError(f"masks not found for {missing[0]!r} in oracle dataset")
        return masks
    if not Path(cfg.mask_dir).is_dir():
        raise UsageError(f"masks not found: {cfg.mask_dir}")
    return load_mask_dir(cfg.mask_dir, ids)


# -- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    builder = {"color": color_only_spec, "shape": shape_only_spec}[args.kind]
    spec = builder(num_classes=args.classes, num_parts=args.parts,
                   images_per_class=args.images_per_class,
                   seed=resolve_seed(args.seed), canvas=args.canvas,
                   part_size=args.part_size)
    samples, masks = generate_synthetic(spec)
    n_train = args.n_train if args.n_train is not None else int(0.8 * len(samples))
    out = Path(args.out)
    export_folder(samples[:n_train], spec.class_names, out / "train")
    export_folder(samples[n_train:], spec.class_names, out / "test")
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for sid in sorted(masks):
        save_masks(masks[sid], mask_path(out / "masks", sid))
    meta = {"dataset_id": spec.dataset_id(), "n_train": n_train, "spec": asdict(spec)}
    (out / "synth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} images ({n_train} train) to {out}")
    return 0


def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise UsageError(f"config not found: {config_path}")
    raw = json.loads(config_path.read_text())
    if args.out:
        raw["out"] = args.out
    cfg = RunConfig.from_dict(raw, config_path.parent)
    train_cfg = dict(cfg.train)
    for key in ("epochs",):
        if getattr(args, key) is not None:
            train_cfg[key] = getattr(args, key)
    train_cfg["seed"] = resolve_seed(args.seed, cfg.seed, train_cfg.get("seed"))

    samples, classes = load_folder(cfg.train_dir)
    masks = load_run_masks(cfg, [s.id for s in samples])
    train_cfg.setdefault("num_classes", len(classes))
    first = next(iter(masks.values()))
    train_cfg.setdefault("num_parts", first.shape[0] - 1)
    train_cfg.setdefault("image_size", samples[0].pixels.shape[0])
    config = TrainConfig.from_dict(train_cfg)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.csv", "w") as fh:
        ckpt = train(config, samples, masks, log_file=fh)
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    effective = {**asdict(cfg), "train": config.to_dict(), "classes": classes}
    write_manifest(ckpt, out / "manifest.json", extra={"effective_config": effective})
    print(f"checkpoint written to {out / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    samples, _ = load_folder(args.data)
    masks = None
    if args.masks:
        if not Path(args.masks).is_dir():
            raise UsageError(f"masks not found: {args.masks}")
        masks = load_mask_dir(args.masks, [s.id for s in samples])
    hue_seed = resolve_seed(args.seed) if args.hue_perturb else None
    report = evaluate(model, samples, masks, hue_seed=hue_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "metrics.json")
    print(report.to_json(), end="")
    return 0


def cmd_explain(args) -> int:
    from .explain import Explainer

    if args.compare and args.compare[0] == args.compare[1]:
        raise UsageError("--compare needs two distinct classes")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    trainset, classes = load_folder(args.train)
    explainer = Explainer(model, trainset, seed=resolve_seed(args.seed), class_names=classes)
    root = Path(args.out) / "explanations"
    did = False
    if args.local:
        explainer.write_local(_image_arg(args.local), root)
        did = True
    if args.global_class is not None:
        explainer.write_global(args.global_class, root)
        did = True
    if args.compare:
        if not args.image:
            raise UsageError("--compare needs --image")
        explainer.write_compare(_image_arg(args.image), args.compare[0], args.compare[1], root)
        did = True
    if not did:
        raise UsageError("nothing to explain: pass --local, --global or --compare")
    print(f"explanations written to {root}")
    return 0


def _image_arg(path) -> ImageSample:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"image not found: {p}")
    return ImageSample(load_image(p), -1, p.stem)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lucidppn")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset with part masks")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["color", "shape"], default="color")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--parts", type=int, default=2)
    p.add_argument("--images-per-class", type=int, default=125)
    p.add_argument("--n-train", type=int)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--part-size", type=int, default=24)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write metrics.json for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--masks")
    p.add_argument("--hue-perturb", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="render explanations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True, help="training image folder")
    p.add_argument("--local", metavar="IMAGE")
    p.add_argument("--global", dest="global_class", type=int, metavar="CLASS")
    p.add_argument("--compare", type=int, nargs=2, metavar=("A", "B"))
    p.add_argument("--image", help="image for --compare")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, SyntheticSpecError, MaskFormatError, CheckpointError,
            FileNotFoundError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
