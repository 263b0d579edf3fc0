"""Synthetic weather degradation generators.

Produces aligned (clean, degraded, label) tuples for the three supported
conditions: snow, raindrops, and heavy rain with haze.  Compositing follows
the standard physical models

    raindrop:    I_w = (1 - M) * I_c + R
    heavy rain:  I_w = T * (I_c + sum_i R_i) + (1 - T) * A
    snow:        I_w = (1 - M) * I_c + M * S

while the procedural content (drop shapes, streak textures, flake fields,
transmission maps) is deliberately simple so datasets regenerate bit-for-bit
from a seed at desk scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

WEATHER_CLASSES = ("snow", "raindrop", "rain_haze")

PROMPT_TEMPLATE = "An image with {}"
PROMPT_PHRASES = {
    "snow": "snow",
    "raindrop": "raindrops",
    "rain_haze": "heavy rain and haze",
}


def class_index(name: str) -> int:
    try:
        return WEATHER_CLASSES.index(name)
    except ValueError:
        raise ValueError(f"unknown weather class {name!r}, expected one of {WEATHER_CLASSES}")


def one_hot_label(name: str) -> np.ndarray:
    label = np.zeros(len(WEATHER_CLASSES), dtype=np.float64)
    label[class_index(name)] = 1.0
    return label


def weather_prompts() -> list[str]:
    """Text prompt per class, in canonical class order."""
    return [PROMPT_TEMPLATE.format(PROMPT_PHRASES[c]) for c in WEATHER_CLASSES]


@dataclass
class RaindropParams:
    mask: np.ndarray      # H x W in [0, 1]
    residual: np.ndarray  # H x W x 3, zero wherever mask is zero


@dataclass
class HeavyRainParams:
    transmission: np.ndarray        # H x W in [0, 1]
    streaks: list[np.ndarray]       # each H x W x 3
    atmosphere: np.ndarray          # scalar or 3-vector in [0, 1]


@dataclass
class SnowParams:
    mask: np.ndarray    # H x W in [0, 1]
    flakes: np.ndarray  # H x W x 3


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    return image


def composite_raindrop(clean: np.ndarray, params: RaindropParams) -> np.ndarray:
    clean = _check_image(clean)
    mask = params.mask[..., None]
    out = (1.0 - mask) * clean + params.residual
    return np.clip(out, 0.0, 1.0)


def composite_heavyrain(clean: np.ndarray, params: HeavyRainParams) -> np.ndarray:
    clean = _check_image(clean)
    t = params.transmission[..., None]
    rain = clean + sum(params.streaks)
    out = t * rain + (1.0 - t) * params.atmosphere
    return np.clip(out, 0.0, 1.0)


def composite_snow(clean: np.ndarray, params: SnowParams) -> np.ndarray:
    clean = _check_image(clean)
    mask = params.mask[..., None]
    out = (1.0 - mask) * clean + mask * params.flakes
    return np.clip(out, 0.0, 1.0)


def _blob_mask(shape, rng, count, radius_lo, radius_hi, blur):
    """Sum of soft elliptical blobs, clipped to [0, 1]."""
    h, w = shape
    mask = np.zeros((h, w), dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = rng.uniform(radius_lo, radius_hi)
        rx = ry * rng.uniform(0.7, 1.3)
        d2 = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2
        mask += np.where(d2 <= 1.0, 1.0, 0.0)
    mask = ndimage.gaussian_filter(mask, blur)
    return np.clip(mask, 0.0, 1.0)


def sample_raindrop_params(shape, rng: np.random.Generator) -> RaindropParams:
    h, w = shape
    scale = max(h, w) / 96.0
    count = int(rng.integers(18, 34))
    mask = _blob_mask((h, w), rng, count, 3.0 * scale, 8.0 * scale, 1.0 * scale)
    # Drops render as dark blurry lenses with a brighter rim highlight.
    body = rng.uniform(0.15, 0.35)
    rim = ndimage.gaussian_filter(mask, 0.8 * scale) - mask
    appearance = np.clip(body + 1.2 * np.abs(rim)[..., None] + rng.normal(0.0, 0.015, size=(h, w, 3)), 0.0, 1.0)
    residual = mask[..., None] * appearance
    return RaindropParams(mask=mask, residual=residual)


def sample_heavyrain_params(shape, rng: np.random.Generator, num_layers: int = 2) -> HeavyRainParams:
    h, w = shape
    scale = max(h, w) / 96.0
    # Smoothed random field mapped into a haze-heavy transmission range.
    field = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, size=(h, w)), 8.0 * scale)
    lo, hi = field.min(), field.max()
    field = (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)
    t_lo = rng.uniform(0.35, 0.5)
    t_hi = rng.uniform(0.65, 0.8)
    transmission = t_lo + (t_hi - t_lo) * field

    streaks = []
    angle = rng.uniform(-20.0, 20.0)
    for _ in range(num_layers):
        noise = rng.uniform(0.0, 1.0, size=(h, w))
        sparse = np.where(noise > 0.985, 1.0, 0.0)
        length = int(rng.integers(6, 12) * scale) or 6
        kernel = np.zeros((length, length))
        kernel[:, length // 2] = 1.0
        kernel = ndimage.rotate(kernel, angle, reshape=False, order=1)
        total = kernel.sum()
        if total > 0:
            kernel /= total
        streak = ndimage.convolve(sparse, kernel, mode="constant") * rng.uniform(1.5, 3.0)
        streaks.append(np.clip(streak, 0.0, 1.0)[..., None].repeat(3, axis=-1))

    if rng.uniform() < 0.5:
        atmosphere = np.full(3, rng.uniform(0.75, 0.95))
    else:
        base = rng.uniform(0.75, 0.92)
        atmosphere = np.clip(base + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    return HeavyRainParams(transmission=transmission, streaks=streaks, atmosphere=atmosphere)


def sample_snow_params(shape, rng: np.random.Generator) -> SnowParams:
    h, w = shape
    scale = max(h, w) / 96.0
    count = int(rng.integers(120, 220))
    mask = _blob_mask((h, w), rng, count, 0.8 * scale, 2.6 * scale, 0.6 * scale)
    tint = np.array([0.92, 0.95, 1.0]) * rng.uniform(0.9, 1.0)
    flakes = np.clip(np.ones((h, w, 3)) * tint + rng.normal(0.0, 0.02, size=(h, w, 3)), 0.0, 1.0)
    return SnowParams(mask=mask, flakes=flakes)


def synth_raindrop(clean, params: RaindropParams | None = None, seed: int = 0):
    if params is None:
        params = sample_raindrop_params(clean.shape[:2], np.random.default_rng(seed))
    return composite_raindrop(clean, params), one_hot_label("raindrop")


def synth_heavyrain(clean, params: HeavyRainParams | None = None, seed: int = 0):
    if params is None:
        params = sample_heavyrain_params(clean.shape[:2], np.random.default_rng(seed))
    return composite_heavyrain(clean, params), one_hot_label("rain_haze")


def synth_snow(clean, params: SnowParams | None = None, seed: int = 0):
    if params is None:
        params = sample_snow_params(clean.shape[:2], np.random.default_rng(seed))
    return composite_snow(clean, params), one_hot_label("snow")


_SYNTH_BY_CLASS = {
    "snow": (sample_snow_params, composite_snow),
    "raindrop": (sample_raindrop_params, composite_raindrop),
    "rain_haze": (sample_heavyrain_params, composite_heavyrain),
}


def save_image(path, image: np.ndarray) -> None:
    """Write a float [0,1] image as lossless 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read an 8-bit image file as float64 in [0,1], forcing RGB."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def make_clean_images(out_dir, count: int, size: int = 96, seed: int = 0) -> list[Path]:
    """Generate smooth procedural 'clean' images for desk-scale experiments."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        base = rng.uniform(0.0, 1.0, size=(size, size, 3))
        smooth = np.stack(
            [ndimage.gaussian_filter(base[..., c], rng.uniform(4.0, 9.0)) for c in range(3)],
            axis=-1,
        )
        lo, hi = smooth.min(), smooth.max()
        smooth = (smooth - lo) / (hi - lo) if hi > lo else smooth
        # A couple of hard-edged shapes so restoration has structure to recover.
        ys, xs = np.mgrid[0:size, 0:size]
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 12, size / 5)
            color = rng.uniform(0.1, 0.9, size=3)
            inside = ((ys - cy) ** 2 + (xs - cx) ** 2) < r ** 2
            smooth[inside] = 0.5 * smooth[inside] + 0.5 * color
        path = out_dir / f"clean_{i:04d}.png"
        save_image(path, smooth)
        paths.append(path)
    return paths


def _params_digest(params) -> str:
    h = hashlib.sha256()
    for field in vars(params).values():
        arrays = field if isinstance(field, list) else [field]
        for arr in arrays:
            arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
            h.update(arr.tobytes())
    return h.hexdigest()[:16]


def build_dataset(clean_dir, out_dir, per_class: int, seed: int = 0) -> Path:
    """Degrade every clean image once per weather class and write a manifest.

    Returns the manifest path.  Rows are line-delimited JSON with keys
    clean_path, weather_path, class, seed (plus a params digest); the whole
    build is a pure function of (clean_dir contents, per_class, seed).
    """
    clean_dir = Path(clean_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clean_paths = sorted(p for p in clean_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not clean_paths:
        raise ValueError(f"no images found in {clean_dir}")

    manifest_path = out_dir / "manifest.jsonl"
    rows = []
    for class_idx, cls in enumerate(WEATHER_CLASSES):
        sample_fn, composite_fn = _SYNTH_BY_CLASS[cls]
        for i in range(per_class):
            clean_path = clean_paths[i % len(clean_paths)]
            clean = load_image(clean_path)
            rng = np.random.default_rng([seed, class_idx, i])
            params = sample_fn(clean.shape[:2], rng)
            weather = composite_fn(clean, params)
            weather_path = out_dir / f"{cls}_{i:04d}.png"
            save_image(weather_path, weather)
            rows.append({
                "clean_path": str(clean_path),
                "weather_path": str(weather_path),
                "class": cls,
                "seed": seed,
                "params_digest": _params_digest(params),
            })
    with open(manifest_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return manifest_path
