"""Disentangled prototype explanations: grayscale patches, color bar, colored patches."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import ImageSample, to_grayscale
from .metrics import predict
from .model import LucidPPN, resemblance_argmax, top_classes

N_GRAY = 5
N_COLOR = 10
N_COLOR_SHOWN = 5
SAMPLES_PER_PATCH = 64
TILE = 48


@dataclass
class PrototypePatch:
    image_id: str
    cell: tuple  # (row, col) in the feature grid
    box: tuple  # (top, left, bottom, right) in image pixels, bottom/right exclusive
    score: float
    variant: str  # "grayscale" | "color"


@dataclass
class ColorBar:
    swatches: list  # RGB triples ordered along the 1-D embedding
    source_ids: list


@dataclass
class PartEntry:
    k: int
    r_s: float
    r_c: float
    r_a: float
    r_s_times_r_c: float
    location: tuple  # argmax cell of the aggregated map
    box: tuple
    gray: list = field(default_factory=list)
    color: list = field(default_factory=list)
    color_bar: ColorBar | None = None
    complete: bool = True


@dataclass
class ExplanationRecord:
    image_id: str
    predicted_class: int
    explained_class: int
    score: float  # y_hat of the explained class
    entries: list

    def to_dict(self) -> dict:
        return _round_floats(asdict(self))


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def patch_box(cell, feature_size: int, image_size: int) -> tuple:
    """Image rectangle of a feature cell plus one cell of margin, clipped to the image."""
    row, col = cell
    scale = image_size / feature_size
    r0, r1 = max(row - 1, 0), min(row + 2, feature_size)
    c0, c1 = max(col - 1, 0), min(col + 2, feature_size)
    return (int(round(r0 * scale)), int(round(c0 * scale)),
            int(round(r1 * scale)), int(round(c1 * scale)))


def _ranked(scores: np.ndarray, ids: list, n: int) -> list:
    order = sorted(range(len(ids)), key=lambda i: (-float(scores[i]), ids[i]))
    return order[:n]


def mine_prototype_patches(model: LucidPPN, trainset, k: int, m: int, outputs=None):
    """Top training patches of prototype (k, m).

    Returns ``(gray, color, complete)``: the 5 images with highest ShapeTexNet
    resemblance and the 10 with highest aggregated resemblance, ordered by
    score (descending) then image id. ``complete`` is False when the training
    set has fewer images than requested.
    """
    if not trainset:
        raise ValueError("empty training set")
    out = outputs if outputs is not None else predict(model, [s.pixels for s in trainset])
    ids = [s.id for s in trainset]
    fs, size = out["z_s"].shape[-1], trainset[0].pixels.shape[0]

    def patches(score_key, map_key, n, variant):
        result = []
        for i in _ranked(out[score_key][:, k, m], ids, n):
            cell = resemblance_argmax(out[map_key][i], k, m)
            result.append(PrototypePatch(ids[i], cell, patch_box(cell, fs, size),
                                         float(out[score_key][i, k, m]), variant))
        return result

    gray = patches("r_s", "z_s", N_GRAY, "grayscale")
    color = patches("r_a", "z_a", N_COLOR, "color")
    return gray, color, len(trainset) >= N_COLOR


def order_colors(colors: np.ndarray, seed: int) -> np.ndarray:
    """Order RGB samples along a seeded 1-D t-SNE embedding."""
    colors = np.asarray(colors, dtype=np.float64)
    unique = np.unique(colors, axis=0)
    if len(unique) == 1:
        return unique
    if len(colors) < 4:
        return colors[np.argsort(colors @ np.array([0.299, 0.587, 0.114]), kind="stable")]
    from sklearn.manifold import TSNE

    perplexity = float(min(30.0, (len(colors) - 1) / 3.0))
    emb = TSNE(n_components=1, perplexity=perplexity, init="pca",
               random_state=seed).fit_transform(colors)[:, 0]
    return colors[np.argsort(emb, kind="stable")]


def sample_patch_colors(image: np.ndarray, agg_map: np.ndarray, box, feature_size: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Pixels of a colored patch from cells holding at least half the patch's peak z_a."""
    size = image.shape[0]
    scale = size / feature_size
    top, left, bottom, right = box
    cells = agg_map[int(round(top / scale)):int(round(bottom / scale)),
                    int(round(left / scale)):int(round(right / scale))]
    keep = np.zeros(image.shape[:2], bool)
    if cells.size:
        strong = cells >= 0.5 * cells.max()
        for (dr, dc) in zip(*np.nonzero(strong)):
            r = int(round(top / scale)) + dr
            c = int(round(left / scale)) + dc
            keep[int(round(r * scale)):int(round((r + 1) * scale)),
                 int(round(c * scale)):int(round((c + 1) * scale))] = True
    pixels = image[keep]
    if len(pixels) == 0:
        pixels = image[top:bottom, left:right].reshape(-1, 3)
    if len(pixels) > SAMPLES_PER_PATCH:
        pixels = pixels[np.sort(rng.choice(len(pixels), SAMPLES_PER_PATCH, replace=False))]
    return pixels


def build_color_bar(color_patches, images: dict, agg_maps: dict, k: int, m: int,
                    feature_size: int, seed: int = 0) -> ColorBar:
    """Color bar of a prototype from its top colored patches.

    ``images`` maps image id -> H x W x 3 pixels, ``agg_maps`` image id ->
    K x M x H x W aggregated feature map.
    """
    if not color_patches:
        raise ValueError("need at least one patch")
    rng = np.random.default_rng(seed)
    samples = [sample_patch_colors(images[p.image_id], agg_maps[p.image_id][k, m],
                                   p.box, feature_size, rng) for p in color_patches]
    ordered = order_colors(np.concatenate(samples), seed)
    return ColorBar([list(map(float, c)) for c in ordered],
                    [p.image_id for p in color_patches])


class Explainer:
    """Explanations for one frozen model against its training set."""

    def __init__(self, model: LucidPPN, trainset, seed: int = 0, class_names=None):
        if not trainset:
            raise ValueError("empty training set")
        self.model = model
        self.trainset = trainset
        self.seed = seed
        self.class_names = class_names
        self.images = {s.id: s.pixels for s in trainset}
        self._out = predict(model, [s.pixels for s in trainset])
        self._agg = {s.id: self._out["z_a"][i] for i, s in enumerate(trainset)}
        self._cache = {}

    @property
    def feature_size(self) -> int:
        return self._out["z_s"].shape[-1]

    def prototype(self, k: int, m: int):
        """(gray patches, color patches, color bar, complete) for prototype (k, m)."""
        if (k, m) not in self._cache:
            gray, color, complete = mine_prototype_patches(
                self.model, self.trainset, k, m, outputs=self._out)
            bar = build_color_bar(color, self.images, self._agg, k, m,
                                  self.feature_size, self.seed)
            self._cache[k, m] = (gray, color, bar, complete)
        return self._cache[k, m]

    def _record(self, sample: ImageSample, cls: int, out: dict) -> ExplanationRecord:
        entries = []
        for k in range(self.model.K):
            gray, color, bar, complete = self.prototype(k, cls)
            loc = resemblance_argmax(out["z_a"][0], k, cls)
            r_s, r_c = float(out["r_s"][0, k, cls]), float(out["r_c"][0, k, cls])
            entries.append(PartEntry(
                k=k, r_s=r_s, r_c=r_c, r_a=float(out["r_a"][0, k, cls]),
                r_s_times_r_c=r_s * r_c, location=loc,
                box=patch_box(loc, self.feature_size, sample.pixels.shape[0]),
                gray=gray, color=color[:N_COLOR_SHOWN], color_bar=bar, complete=complete))
        predicted = top_classes(out["y_hat"][0], 1)[0]
        return ExplanationRecord(sample.id, predicted, cls, float(out["y_hat"][0, cls]),
                                 entries)

    def local(self, sample: ImageSample) -> ExplanationRecord:
        out = predict(self.model, [sample.pixels])
        return self._record(sample, top_classes(out["y_hat"][0], 1)[0], out)

    def compare(self, sample: ImageSample, class_a: int | None = None,
                class_b: int | None = None):
        out = predict(self.model, [sample.pixels])
        if class_a is None or class_b is None:
            class_a, class_b = top_classes(out["y_hat"][0], 2)
        if class_a == class_b:
            raise ValueError("comparison needs two distinct classes")
        for c in (class_a, class_b):
            if not 0 <= c < self.model.M:
                raise ValueError(f"class index {c} out of range")
        return self._record(sample, class_a, out), self._record(sample, class_b, out)

    def global_characteristic(self, m: int) -> list:
        if not 0 <= m < self.model.M:
            raise ValueError(f"class index {m} out of range")
        sheets = []
        for k in range(self.model.K):
            gray, color, bar, complete = self.prototype(k, m)
            sheets.append({"class": m, "k": k, "gray": gray, "color": color[:N_COLOR_SHOWN],
                           "color_bar": bar, "complete": complete})
        return sheets

    # -- rendering -------------------------------------------------------------

    def _tile(self, image_id: str, box, gray: bool) -> Image.Image:
        pix = self.images[image_id]
        if gray:
            pix = to_grayscale(pix)
        top, left, bottom, right = box
        return _to_pil(pix[top:bottom, left:right]).resize((TILE, TILE), Image.NEAREST)

    def _prototype_row(self, gray, color, bar) -> Image.Image:
        tiles = [self._tile(p.image_id, p.box, True) for p in gray]
        tiles.append(_bar_image(bar))
        tiles += [self._tile(p.image_id, p.box, False) for p in color]
        return _hstack(tiles)

    def render_record(self, record: ExplanationRecord, sample: ImageSample) -> Image.Image:
        rows = []
        for e in record.entries:
            view = _to_pil(sample.pixels).resize((TILE * 2, TILE * 2), Image.NEAREST)
            s = TILE * 2 / sample.pixels.shape[0]
            top, left, bottom, right = e.box
            ImageDraw.Draw(view).rectangle(
                [left * s, top * s, right * s - 1, bottom * s - 1], outline=(255, 255, 0))
            row = _hstack([view, self._prototype_row(e.gray, e.color, e.color_bar)])
            rows.append(_with_caption(
                row, f"part {e.k}: r_s={e.r_s:.3f} r_c={e.r_c:.3f} r_a={e.r_a:.3f}"))
        title = (f"{record.image_id}: class {record.explained_class} "
                 f"score {record.score:.3f}")
        return _with_caption(_vstack(rows), title)

    def render_sheet(self, sheet: dict) -> Image.Image:
        row = self._prototype_row(sheet["gray"], sheet["color"], sheet["color_bar"])
        return _with_caption(row, f"class {sheet['class']} part {sheet['k']}")

    # -- output tree -----------------------------------------------------------

    def write_local(self, sample: ImageSample, root) -> ExplanationRecord:
        record = self.local(sample)
        d = Path(root) / sample.id
        d.mkdir(parents=True, exist_ok=True)
        _write_json(record.to_dict(), d / "local.json")
        self.render_record(record, sample).save(d / "local.png")
        return record

    def write_compare(self, sample: ImageSample, class_a, class_b, root):
        rec_a, rec_b = self.compare(sample, class_a, class_b)
        d = Path(root) / f"compare_{rec_a.explained_class}_{rec_b.explained_class}"
        d.mkdir(parents=True, exist_ok=True)
        _write_json({"a": rec_a.to_dict(), "b": rec_b.to_dict()}, d / f"{sample.id}.json")
        _hstack([self.render_record(rec_a, sample), self.render_record(rec_b, sample)]
                ).save(d / f"{sample.id}.png")
        return rec_a, rec_b

    def write_global(self, m: int, root) -> list:
        d = Path(root) / f"class_{m}"
        d.mkdir(parents=True, exist_ok=True)
        sheets = self.global_characteristic(m)
        for sheet in sheets:
            stem = d / f"global_part{sheet['k']}"
            _write_json(_round_floats(_jsonable(sheet)), stem.with_suffix(".json"))
            self.render_sheet(sheet).save(stem.with_suffix(".png"))
        return sheets


def _jsonable(sheet: dict) -> dict:
    return {k: ([asdict(p) for p in v] if isinstance(v, list) else
                asdict(v) if isinstance(v, ColorBar) else v) for k, v in sheet.items()}


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _to_pil(pixels: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8))


def _bar_image(bar: ColorBar) -> Image.Image:
    sw = np.asarray(bar.swatches)
    idx = np.minimum((np.arange(TILE) * len(sw)) // TILE, len(sw) - 1)
    strip = np.repeat(sw[idx][None], TILE, axis=0)
    return _to_pil(strip)


def _hstack(images) -> Image.Image:
    w = sum(im.width for im in images) + 2 * (len(images) - 1)
    h = max(im.height for im in images)
    canvas = Image.new("RGB", (w, h), (255, 255, 255))
    x = 0
    for im in images:
        canvas.paste(im, (x, 0))
        x += im.width + 2
    return canvas


def _vstack(images) -> Image.Image:
    w = max(im.width for im in images)
    h = sum(im.height for im in images) + 4 * (len(images) - 1)
    canvas = Image.new("RGB", (w, h), (255, 255, 255))
    y = 0
    for im in images:
        canvas.paste(im, (0, y))
        y += im.height + 4
    return canvas


def _with_caption(image: Image.Image, text: str) -> Image.Image:
    canvas = Image.new("RGB", (image.width, image.height + 14), (255, 255, 255))
    canvas.paste(image, (0, 14))
    ImageDraw.Draw(canvas).text((2, 1), text, fill=(0, 0, 0))
    return canvas
