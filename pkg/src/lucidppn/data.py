"""Image samples, color transforms, augmentation and the synthetic part dataset."""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

LUMA = np.array([0.299, 0.587, 0.114])
GRAY_MEAN = 0.445
GRAY_STD = 0.269
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    label: int
    id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got {self.pixels.shape}")

    def with_pixels(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(pixels, self.label, self.id)


def luminance(pixels: np.ndarray) -> np.ndarray:
    return pixels @ LUMA


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Replicate w = 0.299 r + 0.587 g + 0.114 b into all three channels."""
    w = luminance(pixels)
    return np.repeat(w[..., None], 3, axis=-1).astype(pixels.dtype, copy=False)


def downscale_color(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average an H x W x 3 image down to h x w cells."""
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    src_h, src_w = pixels.shape[:2]
    if h > src_h or w > src_w:
        raise ValueError(f"cannot downscale {src_h}x{src_w} to {h}x{w}")
    if (h, w) == (src_h, src_w):
        return pixels.copy()
    t = torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1)[None]
    out = F.adaptive_avg_pool2d(t.double(), (h, w))[0].permute(1, 2, 0)
    return out.numpy().astype(pixels.dtype)


# -- hue ---------------------------------------------------------------------


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1), 0.0)
    safe_c = np.where(c > 0, c, 1)
    h = np.where(
        v == r,
        ((g - b) / safe_c) % 6,
        np.where(v == g, (b - r) / safe_c + 2, (r - g) / safe_c + 4),
    )
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices = [
        np.stack([v, t, p], -1),
        np.stack([q, v, p], -1),
        np.stack([p, v, t], -1),
        np.stack([p, q, v], -1),
        np.stack([t, p, v], -1),
        np.stack([v, p, q], -1),
    ]
    out = np.zeros_like(hsv)
    for idx, rgb in enumerate(choices):
        out = np.where((i == idx)[..., None], rgb, out)
    return out


def hue_perturb(
    pixels: np.ndarray, angle_degrees: float, return_clamped: bool = False
):
    """Rotate hue by ``angle_degrees`` keeping each pixel's luminance.

    The rotated pixel is rescaled so that 0.299r + 0.587g + 0.114b matches the
    input, then clamped to [0, 1]. With ``return_clamped`` the fraction of
    pixels touched by the clamp is returned as well.
    """
    if not 0 <= angle_degrees < 360:
        raise ValueError(f"angle must be in [0, 360), got {angle_degrees}")
    src = pixels.astype(np.float64)
    if angle_degrees == 0:
        out, frac = src, 0.0
    else:
        hsv = rgb_to_hsv(src)
        hsv[..., 0] = (hsv[..., 0] + angle_degrees / 360.0) % 1.0
        rotated = hsv_to_rgb(hsv)
        w_in = luminance(src)
        w_rot = luminance(rotated)
        scale = np.where(w_rot > 0, w_in / np.where(w_rot > 0, w_rot, 1), 1.0)
        scaled = rotated * scale[..., None]
        clamped = ((scaled > 1) | (scaled < 0)).any(axis=-1)
        out = np.clip(scaled, 0.0, 1.0)
        frac = float(clamped.mean())
    out = out.astype(pixels.dtype)
    return (out, frac) if return_clamped else out


def hue_perturb_unclamped(pixels: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Reference hue rotation through :mod:`colorsys`, one pixel at a time, no clamp."""
    flat = pixels.reshape(-1, 3).astype(np.float64)
    out = np.empty_like(flat)
    for i, (r, g, b) in enumerate(flat):
        h, s, v = colorsys.rgb_to_hsv(r, g, b)
        rr, gg, bb = colorsys.hsv_to_rgb((h + angle_degrees / 360.0) % 1.0, s, v)
        w_in = 0.299 * r + 0.587 * g + 0.114 * b
        w_rot = 0.299 * rr + 0.587 * gg + 0.114 * bb
        k = w_in / w_rot if w_rot > 0 else 1.0
        out[i] = (rr * k, gg * k, bb * k)
    return out.reshape(pixels.shape)


# -- augmentation --------------------------------------------------------------

# Geometric subset of TrivialAugmentWide; nearest sampling so no new colors appear.
AUGMENT_OPS = ("identity", "shear_x", "shear_y", "translate_x", "translate_y", "rotate")
COLOR_OPS = ("hue", "saturation", "solarize", "color_jitter", "color", "posterize")
NUM_MAGNITUDE_BINS = 31


# magnitude ranges at 224 px: shear 0.5, translate 16 px, rotate 60 degrees
MAX_SHEAR = 0.5
MAX_TRANSLATE = 16.0 / 224.0
MAX_ROTATE = 60.0


def _policy_op(t: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    op = AUGMENT_OPS[rng.integers(len(AUGMENT_OPS))]
    level = rng.integers(NUM_MAGNITUDE_BINS) / (NUM_MAGNITUDE_BINS - 1)
    sign = 1 if rng.random() < 0.5 else -1
    size = t.shape[-1]
    nearest = InterpolationMode.NEAREST
    if op == "identity":
        return t
    if op in ("shear_x", "shear_y"):
        deg = math.degrees(math.atan(sign * MAX_SHEAR * level))
        shear = [deg, 0.0] if op == "shear_x" else [0.0, deg]
        return TF.affine(t, angle=0.0, translate=[0, 0], scale=1.0, shear=shear,
                         interpolation=nearest, fill=0.0)
    if op in ("translate_x", "translate_y"):
        shift = int(sign * level * MAX_TRANSLATE * size)
        tr = [shift, 0] if op == "translate_x" else [0, shift]
        return TF.affine(t, angle=0.0, translate=tr, scale=1.0, shear=[0.0, 0.0],
                         interpolation=nearest, fill=0.0)
    return TF.rotate(t, sign * MAX_ROTATE * level, interpolation=nearest, fill=0.0)


def _fix_background(stack: torch.Tensor, n_masks: int) -> torch.Tensor:
    # fill=0 empties every mask channel in exposed corners; give them to background
    if n_masks:
        parts = stack[3:-1].clamp(0, 1)
        total = parts.sum(0, keepdim=True)
        parts = torch.where(total > 1, parts / total.clamp_min(1e-12), parts)
        bg = (1 - parts.sum(0, keepdim=True)).clamp(0, 1)
        stack = torch.cat([stack[:3], parts, bg])
    return stack


def apply_train_augmentations(
    pixels: np.ndarray,
    rng: np.random.Generator,
    size: int,
    masks: np.ndarray | None = None,
    train: bool = True,
):
    """Training transform; masks (K+1 x h x w) follow every geometric step.

    Train: resize to size+8, one color-free policy op, random horizontal flip,
    random resized crop to size x size with scale in [0.95, 1].
    Eval (``train=False``): resize to size x size only.
    """
    img = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)
    n_masks = 0
    stack = img
    if masks is not None:
        m = torch.from_numpy(np.ascontiguousarray(masks, dtype=np.float32))
        if m.shape[1:] != img.shape[1:]:
            m = F.interpolate(m[None], size=img.shape[1:], mode="bilinear",
                              align_corners=False, antialias=True)[0]
        n_masks = m.shape[0]
        stack = torch.cat([img, m])

    def resize(t, hw):
        if tuple(t.shape[1:]) == tuple(hw):
            return t
        return F.interpolate(t[None], size=hw, mode="bilinear", align_corners=False,
                             antialias=True)[0]

    if not train:
        stack = resize(stack, (size, size))
    else:
        stack = resize(stack, (size + 8, size + 8))
        stack = _fix_background(_policy_op(stack, rng), n_masks)
        if rng.random() < 0.5:
            stack = stack.flip(-1)
        stack = _random_resized_crop(stack, rng, size)

    out = stack[:3].clamp(0, 1).permute(1, 2, 0).numpy()
    if masks is None:
        return out
    out_masks = stack[3:].clamp(0, 1)
    out_masks = out_masks / out_masks.sum(0, keepdim=True).clamp_min(1e-12)
    return out, out_masks.numpy()


def _random_resized_crop(t: torch.Tensor, rng: np.random.Generator, size: int,
                         scale=(0.95, 1.0), ratio=(3 / 4, 4 / 3)) -> torch.Tensor:
    h, w = t.shape[1:]
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        ch, cw, top, left = h, w, 0, 0
    crop = t[:, top:top + ch, left:left + cw]
    return F.interpolate(crop[None], size=(size, size), mode="bilinear",
                         align_corners=False, antialias=True)[0]


# -- synthetic dataset ---------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")
TEXTURES = ("flat", "stripes", "checker", "dots")
SATURATION = 0.6
# with saturation 0.6 a luminance of 0.467 already saturates the blue channel
PART_LUMA = (0.16, 0.40)
BACKGROUND_LUMA = 0.08
NOISE = 0.04


class SyntheticSpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    num_classes: int
    num_parts: int
    shapes: list  # [class][part] -> index into SHAPES
    textures: list  # [class][part] -> index into TEXTURES
    hues: list  # [class][part] -> hue in [0, 1)
    canvas: int = 64
    part_size: int = 22
    images_per_class: int = 100
    seed: int = 0
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class_{m:03d}" for m in range(self.num_classes)]

    def validate(self):
        M, K = self.num_classes, self.num_parts
        if M < 1 or K < 1:
            raise SyntheticSpecError("need at least one class and one part")
        for name in ("shapes", "textures", "hues"):
            table = getattr(self, name)
            if len(table) != M or any(len(row) != K for row in table):
                raise SyntheticSpecError(f"{name} must be a {M}x{K} table")
        if self.part_size > self.canvas:
            raise SyntheticSpecError("part larger than canvas")
        cells = (self.canvas // self.part_size) ** 2
        if K * self.part_size ** 2 > self.canvas ** 2 or cells < K:
            raise SyntheticSpecError(
                f"{K} parts of size {self.part_size} cannot be placed without "
                f"overlap on a {self.canvas} canvas")
        signatures = {
            tuple(zip(self.shapes[m], self.textures[m], self.hues[m])) for m in range(M)
        }
        if len(signatures) != M:
            raise SyntheticSpecError("two classes share every part attribute")

    def dataset_id(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def color_only_spec(num_classes=4, num_parts=2, images_per_class=125, seed=0,
                    canvas=64, part_size=24) -> SyntheticSpec:
    """Classes share shape and texture per part and differ only by hue."""
    return SyntheticSpec(
        num_classes=num_classes,
        num_parts=num_parts,
        shapes=[[k % len(SHAPES) for k in range(num_parts)] for _ in range(num_classes)],
        textures=[[k % len(TEXTURES) for k in range(num_parts)]
                  for _ in range(num_classes)],
        hues=[[m / num_classes] * num_parts for m in range(num_classes)],
        canvas=canvas, part_size=part_size, images_per_class=images_per_class, seed=seed,
    )


def shape_only_spec(num_classes=4, num_parts=2, images_per_class=125, seed=0,
                    canvas=64, part_size=24, hue=0.08) -> SyntheticSpec:
    """Classes share one hue and the per-part texture; shapes differ per class."""
    return SyntheticSpec(
        num_classes=num_classes,
        num_parts=num_parts,
        shapes=[[(m + k) % len(SHAPES) for k in range(num_parts)]
                for m in range(num_classes)],
        textures=[[k % len(TEXTURES) for k in range(num_parts)]
                  for _ in range(num_classes)],
        hues=[[hue] * num_parts for _ in range(num_classes)],
        canvas=canvas, part_size=part_size, images_per_class=images_per_class, seed=seed,
    )


def shape_mask(shape: str, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - c, xx - c
    r = size / 2.0
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        return np.ones((size, size), bool)
    if shape == "triangle":
        # apex at top, base at bottom
        return np.abs(dx) <= (yy + 0.5) / size * r
    if shape == "cross":
        arm = size / 6.0
        return (np.abs(dx) <= arm) | (np.abs(dy) <= arm)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def texture_field(texture: str, size: int) -> np.ndarray:
    """Luminance pattern for one part, values in PART_LUMA."""
    lo, hi = PART_LUMA
    yy, xx = np.mgrid[0:size, 0:size]
    if texture == "flat":
        pattern = np.full((size, size), 0.5)
    elif texture == "stripes":
        pattern = ((yy // 3) % 2).astype(float)
    elif texture == "checker":
        pattern = (((yy // 3) + (xx // 3)) % 2).astype(float)
    elif texture == "dots":
        pattern = (((yy % 5) - 2) ** 2 + ((xx % 5) - 2) ** 2 <= 2).astype(float)
    else:
        raise ValueError(f"unknown texture {texture!r}")
    return lo + (hi - lo) * pattern


def unit_luma_color(hue: float, saturation: float = SATURATION) -> np.ndarray:
    """RGB direction of the given hue scaled to unit luminance."""
    rgb = np.array(colorsys.hsv_to_rgb(hue % 1.0, saturation, 1.0))
    return rgb / float(rgb @ LUMA)


def _place_parts(rng, K, canvas, size, tries=1000):
    boxes = []
    for _ in range(tries):
        boxes = []
        for _ in range(K):
            top, left = rng.integers(0, canvas - size + 1, size=2)
            if any(abs(top - t) < size and abs(left - l) < size for t, l in boxes):
                break
            boxes.append((int(top), int(left)))
        if len(boxes) == K:
            return boxes
    raise SyntheticSpecError(f"could not place {K} non-overlapping parts")


def render_synthetic_image(spec: SyntheticSpec, label: int, rng: np.random.Generator):
    S, P, K = spec.canvas, spec.part_size, spec.num_parts
    luma = np.full((S, S), BACKGROUND_LUMA)
    color = np.ones((S, S, 3))  # gray background
    masks = np.zeros((K + 1, S, S))
    for k, (top, left) in enumerate(_place_parts(rng, K, S, P)):
        support = shape_mask(SHAPES[spec.shapes[label][k]], P)
        tex = texture_field(TEXTURES[spec.textures[label][k]], P)
        win = (slice(top, top + P), slice(left, left + P))
        luma[win] = np.where(support, tex, luma[win])
        color[win] = np.where(support[..., None], unit_luma_color(spec.hues[label][k]),
                              color[win])
        masks[k][win] = support
    masks[K] = 1.0 - masks[:K].sum(0)
    luma = luma * (1.0 + NOISE * (2 * rng.random((S, S)) - 1))
    pixels = np.clip(color * luma[..., None], 0.0, 1.0)
    return pixels.astype(np.float32), masks.astype(np.float32)


def generate_synthetic(spec: SyntheticSpec):
    """Render ``images_per_class`` images per class and their exact part masks.

    Images are interleaved by class (id ``img_00000`` is class 0, the next
    class 1, ...). Returns ``(samples, masks)`` with masks keyed by sample id.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    samples, masks = [], {}
    n = spec.num_classes * spec.images_per_class
    for i in range(n):
        label = i % spec.num_classes
        pixels, mask = render_synthetic_image(spec, label, rng)
        sid = f"img_{i:05d}"
        samples.append(ImageSample(pixels, label, sid))
        masks[sid] = mask
    return samples, masks


def split(samples, n_train: int):
    return samples[:n_train], samples[n_train:]


# -- folders -------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(pixels: np.ndarray, path) -> None:
    arr = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_folder(root) -> tuple[list[ImageSample], list[str]]:
    """Read ``root/<class_name>/<image>.{png,jpg}``; classes in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    samples, seen = [], set()
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            if path.stem in seen:
                raise ValueError(f"duplicate image id {path.stem!r}")
            seen.add(path.stem)
            samples.append(ImageSample(load_image(path), label, path.stem))
    if not samples:
        raise ValueError(f"no images under {root}")
    return samples, classes


def export_folder(samples, class_names, root) -> None:
    root = Path(root)
    for s in samples:
        d = root / class_names[s.label]
        d.mkdir(parents=True, exist_ok=True)
        save_image(s.pixels, d / f"{s.id}.png")
