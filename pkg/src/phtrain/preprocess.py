"""Image preprocessing (center crop, bilinear resize, flip/jitter augmentation)
and a synthetic dermoscopy-like dataset generator."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError

CLASS_CODES = ("MEL", "NV", "BCC", "AK", "BKL", "DF", "VASC", "SCC")

# ISIC 2019 class shares: NV 50 %, MEL 18 %, BCC 13 %, BKL 10 %, the remaining four
# classes split the rest evenly.
ISIC_PROPORTIONS = {
    "MEL": 0.18,
    "NV": 0.50,
    "BCC": 0.13,
    "AK": 0.0225,
    "BKL": 0.10,
    "DF": 0.0225,
    "VASC": 0.0225,
    "SCC": 0.0225,
}


def class_index(code) -> int:
    """Map a class code (or an integer-like label) to its index."""
    if isinstance(code, (int, np.integer)):
        idx = int(code)
    elif isinstance(code, str) and code.strip().lstrip("-").isdigit():
        idx = int(code)
    else:
        try:
            return CLASS_CODES.index(str(code).strip().upper())
        except ValueError:
            raise DataError(f"unknown class code {code!r}") from None
    if not 0 <= idx < len(CLASS_CODES):
        raise DataError(f"class index {idx} out of range")
    return idx


@dataclass(frozen=True, eq=False)
class RawImage:
    """Row-major 8-bit RGB pixels, stored as a (height, width, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError(f"expected (height, width, 3) pixels, got {px.shape}")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise DataError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes) -> "RawImage":
        if len(data) != width * height * 3:
            raise DataError(f"pixel data length {len(data)} != {width}*{height}*3")
        return cls(np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 3

    @property
    def data(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        if not isinstance(other, RawImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"RawImage({self.width}x{self.height})"


def encode_png(image: RawImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(blob: bytes) -> RawImage:
    try:
        with Image.open(io.BytesIO(blob)) as im:
            return RawImage(np.asarray(im.convert("RGB")))
    except (OSError, ValueError, SyntaxError) as exc:
        raise DataError(f"cannot decode image: {exc}") from exc


# --------------------------------------------------------------------------- geometry


def center_crop(image: RawImage) -> RawImage:
    """Largest centered square; offsets are floor((dim - side) / 2)."""
    side = min(image.width, image.height)
    x0 = (image.width - side) // 2
    y0 = (image.height - side) // 2
    return RawImage(image.pixels[y0 : y0 + side, x0 : x0 + side])


def crop_offsets(width: int, height: int) -> tuple[int, int]:
    side = min(width, height)
    return (width - side) // 2, (height - side) // 2


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centers (align_corners=False), clamped at the borders
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize(image: RawImage, target: int) -> RawImage:
    if image.width != image.height:
        raise ConfigurationError(f"resize expects a square image, got {image.width}x{image.height}; crop first")
    if target < 1:
        raise ConfigurationError("target size must be positive")
    if target == image.width:
        return RawImage(image.pixels.copy())
    src = image.pixels.astype(np.float64)
    lo, hi, w = _bilinear_axis(image.width, target)
    rows = src[lo] * (1 - w)[:, None, None] + src[hi] * w[:, None, None]
    out = rows[:, lo] * (1 - w)[None, :, None] + rows[:, hi] * w[None, :, None]
    return RawImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def standardize(image: RawImage, target: int) -> RawImage:
    """center_crop followed by resize."""
    return resize(center_crop(image), target)


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    target_size: int = 256

    def __post_init__(self):
        for name in ("horizontal_flip_prob", "vertical_flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} jitter range must be non-negative")
        if self.hue > 0.5:
            raise ConfigurationError("hue jitter range must not exceed 0.5")
        if not (isinstance(self.target_size, int) and self.target_size >= 1):
            raise ConfigurationError("target_size must be a positive integer")

    @classmethod
    def identity(cls, target_size: int = 256) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, target_size)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**d)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    delta = maxc - np.minimum(np.minimum(r, g), b)
    gray = delta == 0
    safe = np.where(gray, 1.0, delta)
    h = np.where(maxc == b, 4.0 + (r - g) / safe, 2.0 + (b - r) / safe)
    red_max = maxc == r
    h[red_max] = ((g - b)[red_max] / safe[red_max]) % 6.0
    h /= 6.0
    h[gray] = 0.0
    s = delta / np.where(maxc == 0, 1.0, maxc)
    return np.stack([h, s, maxc], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    vs = v * s
    out = np.empty_like(hsv)
    # channel = v - v*s*clip(min(k, 4-k), 0, 1) with k = (n + 6h) mod 6, n = 5, 3, 1
    for c, n in enumerate((5.0, 3.0, 1.0)):
        k = (n + 6.0 * h) % 6.0
        out[..., c] = v - vs * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return out


_LUMA = np.array([0.299, 0.587, 0.114])


def augment_batch(pixels: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment an (N, H, W, 3) uint8 batch, drawing one set of parameters per image.

    Order: horizontal flip, vertical flip, brightness, contrast, saturation, hue.
    Brightness/contrast/saturation factors are Uniform[1-r, 1+r]; hue is a
    rotation by Uniform[-r, r] of a full turn in HSV space. Values are clamped
    to [0, 255] and rounded once at the end.
    """
    px = np.asarray(pixels)
    n = px.shape[0]
    hflip = rng.random(n) < config.horizontal_flip_prob
    vflip = rng.random(n) < config.vertical_flip_prob
    bright = rng.uniform(1 - config.brightness, 1 + config.brightness, n)
    contrast = rng.uniform(1 - config.contrast, 1 + config.contrast, n)
    sat = rng.uniform(1 - config.saturation, 1 + config.saturation, n)
    hue = rng.uniform(-config.hue, config.hue, n)

    out = px.copy()
    out[hflip] = out[hflip][:, :, ::-1]
    out[vflip] = out[vflip][:, ::-1]
    if not (config.brightness or config.contrast or config.saturation or config.hue):
        return out
    x = _photometric(
        out.astype(np.float64),
        bright if config.brightness else None,
        contrast if config.contrast else None,
        sat if config.saturation else None,
        hue if config.hue else None,
    )
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _photometric(x, bright=None, contrast=None, sat=None, hue=None):
    """Apply per-image jitter factors (arrays of length N, or None to skip) to float pixels."""

    def per_image(f):
        return np.maximum(np.asarray(f, dtype=np.float64), 0.0)[:, None, None, None]

    if bright is not None:
        x = np.clip(x * per_image(bright), 0, 255)
    if contrast is not None:
        mean = (x @ _LUMA).mean(axis=(1, 2))[:, None, None, None]
        x = np.clip((x - mean) * per_image(contrast) + mean, 0, 255)
    if sat is not None:
        gray = (x @ _LUMA)[..., None]
        x = np.clip((x - gray) * per_image(sat) + gray, 0, 255)
    if hue is not None:
        hsv = _rgb_to_hsv(x / 255.0)
        hsv[..., 0] = (hsv[..., 0] + np.asarray(hue, dtype=np.float64)[:, None, None]) % 1.0
        x = _hsv_to_rgb(hsv) * 255.0
    return x


def color_jitter(image: RawImage, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0) -> RawImage:
    """Deterministic jitter with explicit factors (1.0 / 0.0 hue = no change)."""
    x = _photometric(
        image.pixels[None].astype(np.float64),
        None if brightness == 1.0 else [brightness],
        None if contrast == 1.0 else [contrast],
        None if saturation == 1.0 else [saturation],
        None if hue == 0.0 else [hue],
    )
    return RawImage(np.clip(np.floor(x[0] + 0.5), 0, 255).astype(np.uint8))


def augment(image: RawImage, config: AugmentConfig, rng_seed: int) -> RawImage:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(rng_seed)))
    return RawImage(augment_batch(image.pixels[None], config, rng)[0])


def horizontal_flip(image: RawImage) -> RawImage:
    return RawImage(image.pixels[:, ::-1])


def vertical_flip(image: RawImage) -> RawImage:
    return RawImage(image.pixels[::-1])


def to_features(pixels: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) uint8 -> (N, H*W*3) float64 in [0, 1]."""
    px = np.asarray(pixels)
    return px.reshape(px.shape[0], -1).astype(np.float64) / 255.0


def stack_standardized(images: Sequence[RawImage], target: int) -> np.ndarray:
    if not images:
        return np.zeros((0, target, target, 3), dtype=np.uint8)
    return np.stack([standardize(im, target).pixels for im in images])


# --------------------------------------------------------------------------- synthetic data


def largest_remainder(n: int, proportions: Sequence[float]) -> list[int]:
    """Integer counts summing to n, each floor or ceil of n*p; ties go to the lower index."""
    quotas = [n * p for p in proportions]
    counts = [math.floor(q) for q in quotas]
    short = n - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _normalize_proportions(class_proportions) -> list[float]:
    if isinstance(class_proportions, dict):
        props = [0.0] * len(CLASS_CODES)
        for code, p in class_proportions.items():
            props[class_index(code)] = float(p)
        return props
    return [float(p) for p in class_proportions]


# Per-class appearance: lesion RGB, base radius (fraction of the side), stripe
# frequency (cycles per side, 0 = none) and stripe orientation in degrees.
_CLASS_STYLE = [
    ((70, 40, 35), 0.36, 3.0, 0),
    ((120, 80, 60), 0.26, 0.0, 0),
    ((175, 110, 120), 0.30, 2.0, 90),
    ((160, 90, 70), 0.22, 4.0, 45),
    ((140, 120, 90), 0.32, 0.0, 0),
    ((110, 70, 90), 0.18, 2.0, 135),
    ((150, 40, 60), 0.24, 0.0, 0),
    ((200, 170, 150), 0.28, 3.0, 0),
]


def _render(label: int, size: int, rng: np.random.Generator, noise: float, color_spread: float) -> np.ndarray:
    color, radius, freq, angle = _CLASS_STYLE[label % len(_CLASS_STYLE)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx = size / 2 + rng.normal(0, size * 0.08)
    cy = size / 2 + rng.normal(0, size * 0.08)
    r = size * radius * rng.uniform(0.75, 1.25)
    dist = np.hypot(xx - cx, yy - cy)
    disk = np.clip(r + 0.5 - dist, 0.0, 1.0)

    skin = np.array([225.0, 180.0, 155.0]) + rng.normal(0, 12, 3)
    lesion = np.array(color, dtype=np.float64) + rng.normal(0, color_spread, 3)
    if freq:
        theta = math.radians(angle + rng.normal(0, 15))
        u = (xx * math.cos(theta) + yy * math.sin(theta)) / size
        texture = 0.5 + 0.5 * np.sin(2 * math.pi * freq * u + rng.uniform(0, 2 * math.pi))
        lesion_px = lesion[None, None, :] * (0.7 + 0.45 * texture[..., None])
    else:
        lesion_px = np.broadcast_to(lesion, (size, size, 3))
    img = skin[None, None, :] * (1 - disk[..., None]) + lesion_px * disk[..., None]
    img += rng.normal(0, noise, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synth_dataset(
    n: int,
    class_proportions=None,
    image_size: int = 16,
    seed: int = 0,
    noise: float = 60.0,
    color_spread: float = 4.0,
) -> list[tuple[RawImage, int]]:
    """``n`` labeled textured-disk images with class counts by largest remainder.

    ``noise`` is the per-pixel Gaussian sd; ``color_spread`` the per-image sd of
    the lesion colour. A small spread keeps the classes separable, so accuracy
    is limited by how much data the learner sees rather than by class overlap.

    Samples are returned grouped by class in ascending class order; callers
    that need a random order shuffle themselves (the partitioner does).
    """
    props = _normalize_proportions(ISIC_PROPORTIONS if class_proportions is None else class_proportions)
    if any(p < 0 for p in props) or abs(sum(props) - 1.0) > 1e-9:
        raise ConfigurationError("class proportions must be non-negative and sum to 1")
    if n < len(props):
        raise ConfigurationError(f"n={n} is smaller than the number of classes ({len(props)})")
    if image_size < 2:
        raise ConfigurationError("image_size must be >= 2")
    if noise < 0 or color_spread < 0:
        raise ConfigurationError("noise and color_spread must be non-negative")
    counts = largest_remainder(n, props)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5E17])))
    out = []
    for label, count in enumerate(counts):
        for _ in range(count):
            out.append((RawImage(_render(label, image_size, rng, noise, color_spread)), label))
    return out


def write_image_tree(samples, directory, prefix: str = "img") -> Path:
    """Write PNGs plus ``labels.csv`` (filename,label) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(samples))))
    with open(directory / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        for i, (image, label) in enumerate(samples):
            name = f"{prefix}_{i:0{width}d}.png"
            (directory / name).write_bytes(encode_png(image))
            writer.writerow([name, CLASS_CODES[label]])
    return directory / "labels.csv"


def read_labels_csv(path) -> list[tuple[str, int]]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"labels file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["filename", "label"]:
            raise ConfigurationError(f"{path}: header must be 'filename,label'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((row["filename"].strip(), class_index(row["label"])))
            except DataError as exc:
                raise ConfigurationError(f"{path}:{lineno}: {exc}") from None
    return rows
