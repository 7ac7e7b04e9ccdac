import importlib
import io
import struct

import numpy as np
import pytest
import torch

from lucidppn.data import color_only_spec, generate_synthetic
from lucidppn.losses import LossBreakdown
from lucidppn.train import (
    CheckpointCorruptError,
    CheckpointVersionError,
    TrainConfig,
    TrainingDivergedError,
    build_model,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
    train,
)

# the package re-exports train(), which shadows the submodule attribute
train_mod = importlib.import_module("lucidppn.train")


def tiny_config(**kw):
    base = dict(num_parts=2, num_classes=4, epochs=3, batch_size=4, freeze_epochs=1,
                image_size=32, backbone_channels=8, color_widths=(4, 4, 4, 4, 4), seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    samples, masks = generate_synthetic(color_only_spec(images_per_class=2, seed=5))
    return samples, masks


def _snapshots(config, samples, masks):
    snaps = []

    def grab(epoch, model):
        snaps.append({
            "backbone": [p.detach().clone() for p in model.backbone_parameters()],
            "head": [p.detach().clone() for p in model.head_parameters()],
            "color": [p.detach().clone() for p in model.colornet.parameters()],
        })

    torch.manual_seed(config.seed)
    init = build_model(config)
    grab(-1, init)
    ckpt = train(config, samples, masks, on_epoch=grab)
    return ckpt, snaps


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_backbone_frozen_for_freeze_epochs(tiny_data):
    config = tiny_config(freeze_epochs=2)
    _, snaps = _snapshots(config, *tiny_data)
    init = snaps[0]
    assert _same(snaps[1]["backbone"], init["backbone"])
    assert _same(snaps[2]["backbone"], init["backbone"])
    assert not _same(snaps[3]["backbone"], init["backbone"])
    # head and ColorNet train from the first epoch
    assert not _same(snaps[1]["head"], init["head"])
    assert not _same(snaps[1]["color"], init["color"])


def test_color_delay_keeps_colornet_fixed_then_full_budget(tiny_data):
    config = tiny_config(epochs=3, color_delay=2, freeze_epochs=0)
    ckpt, snaps = _snapshots(config, *tiny_data)
    assert config.total_epochs == 5 and len(snaps) == 1 + 5
    init = snaps[0]
    assert _same(snaps[1]["color"], init["color"]) and _same(snaps[2]["color"], init["color"])
    changed = [not _same(snaps[e]["color"], snaps[e - 1]["color"]) for e in range(1, 6)]
    assert changed == [False, False, True, True, True]
    assert not _same(snaps[1]["head"], init["head"])
    assert ckpt.epoch == 5


def test_shapetex_lr_schedule():
    c = TrainConfig()
    assert [c.shapetex_lr(e) for e in (0, 14, 15, 39)] == [0.002, 0.002, 0.0002, 0.0002]
    assert c.lr_colornet == 0.002
    assert c.betas == (0.9, 0.999) and c.adam_eps == 1e-8 and c.weight_decay == 0


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(color_delay=3), dict(freeze_epochs=4),
                                dict(alpha_d=-1.0), dict(num_parts=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tiny_config(**kw)


def test_config_dict_round_trip():
    c = tiny_config()
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert TrainConfig.from_dict(c.to_dict()).hash() == c.hash()
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 1})


def test_training_is_deterministic(tiny_data):
    a = train(tiny_config(), *tiny_data)
    b = train(tiny_config(), *tiny_data)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert a.rng_digest == b.rng_digest
    c = train(tiny_config(seed=4), *tiny_data)
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_training_log_and_history(tiny_data):
    buf = io.StringIO()
    ckpt = train(tiny_config(), *tiny_data, log_file=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,l_d,l_s,l_a,total"
    steps_per_epoch = -(-len(tiny_data[0]) // 4)
    assert len(lines) == 1 + 3 * steps_per_epoch
    row = [float(x) for x in lines[1].split(",")]
    assert row[4] == pytest.approx(1.4 * row[1] + row[2] + row[3], abs=1e-5)
    assert [h["epoch"] for h in ckpt.history] == [0, 1, 2]


def test_loss_decreases(tiny_data):
    ckpt = train(tiny_config(epochs=6), *tiny_data)
    assert ckpt.history[-1]["total"] < ckpt.history[0]["total"]


def test_checkpoint_round_trip(tiny_data, tmp_path):
    ckpt = train(tiny_config(), *tiny_data)
    path = tmp_path / "c.lpck"
    save_checkpoint(ckpt, path)
    again = load_checkpoint(path)
    assert again.config == ckpt.config and again.history == ckpt.history
    assert checkpoint_bytes(again) == path.read_bytes()
    x = torch.rand(3, 3, 32, 32)
    with torch.no_grad():
        a = ckpt.model().forward_rgb(x)
        b = again.model().forward_rgb(x)
    assert torch.equal(a.y_hat, b.y_hat) and torch.equal(a.z_a, b.z_a)


def test_checkpoint_errors(tiny_data, tmp_path):
    data = checkpoint_bytes(train(tiny_config(epochs=1, freeze_epochs=0), *tiny_data))
    trunc = tmp_path / "t.lpck"
    trunc.write_bytes(data[:-10])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(trunc)
    trunc.write_bytes(data[:6])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(trunc)
    ver = tmp_path / "v.lpck"
    ver.write_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(ver)
    flipped = bytearray(data)
    flipped[-1] ^= 0xFF
    (tmp_path / "f.lpck").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "f.lpck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.lpck")


def test_missing_masks_rejected(tiny_data):
    samples, masks = tiny_data
    partial = dict(masks)
    partial.pop(samples[0].id)
    with pytest.raises(KeyError):
        train(tiny_config(), samples, partial)


def test_non_finite_loss_aborts(tiny_data, monkeypatch):
    real = train_mod.total_loss

    def poisoned(*a, **kw):
        out = real(*a, **kw)
        return LossBreakdown(out.l_d, out.l_s, out.l_a, out.total * float("nan"))

    monkeypatch.setattr(train_mod, "total_loss", poisoned)
    with pytest.raises(TrainingDivergedError):
        train(tiny_config(), *tiny_data)


def test_masks_are_aligned_with_augmented_images(tiny_data):
    samples, masks = tiny_data
    rng = np.random.default_rng(0)
    rgb, t, y = train_mod.make_batch(samples[:4], masks, 32, 4, rng, train=True)
    assert rgb.shape == (4, 3, 32, 32) and t.shape == (4, 3, 4, 4)
    torch.testing.assert_close(t.sum(1), torch.ones(4, 4, 4))
    assert y.tolist() == [s.label for s in samples[:4]]
