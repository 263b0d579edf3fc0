"""Dataset loading, paired cropping, and Cut-Mix multi-weather augmentation.

Batches are a pure function of (manifest, seed, epoch): images load in a
fixed order, every random draw comes from one seeded generator, and the
label vector of a mixed sample equals the exact pasted-pixel area fraction.
The degraded image and its clean target always receive identical geometry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .synth import WEATHER_CLASSES, load_image, one_hot_label


@dataclass
class Sample:
    weather: np.ndarray   # H x W x 3 in [0, 1]
    clean: np.ndarray     # same shape
    label: np.ndarray     # probability vector over weather classes

    def __post_init__(self):
        if self.weather.shape != self.clean.shape:
            raise ValueError(
                f"weather/clean shapes differ: {self.weather.shape} vs {self.clean.shape}"
            )
        if not np.isclose(self.label.sum(), 1.0, atol=1e-6):
            raise ValueError(f"label must sum to 1, got {self.label.sum()}")


@dataclass
class AugmentConfig:
    crop: int = 256
    cutmix_prob: float = 0.7
    cutmix_area: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        if not 0.0 <= self.cutmix_prob <= 1.0:
            raise ValueError(f"cutmix_prob must be in [0,1], got {self.cutmix_prob}")


def load_manifest(path) -> list[dict]:
    rows = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        row = json.loads(line)
        missing = {"clean_path", "weather_path", "class", "seed"} - row.keys()
        if missing:
            raise ValueError(f"manifest line {line_no} missing keys {sorted(missing)}")
        if row["class"] not in WEATHER_CLASSES:
            raise ValueError(f"manifest line {line_no}: unknown class {row['class']!r}")
        rows.append(row)
    if not rows:
        raise ValueError(f"manifest {path} is empty")
    return rows


class WeatherPairDataset:
    """In-memory paired dataset read from a manifest."""

    def __init__(self, manifest_path):
        self.rows = load_manifest(manifest_path)
        self._images: list[tuple[np.ndarray, np.ndarray]] = [
            (load_image(row["weather_path"]), load_image(row["clean_path"]))
            for row in self.rows
        ]

    def __len__(self) -> int:
        return len(self.rows)

    def sample(self, idx: int) -> Sample:
        weather, clean = self._images[idx]
        return Sample(weather=weather, clean=clean,
                      label=one_hot_label(self.rows[idx]["class"]))

    def classes(self) -> list[str]:
        return [row["class"] for row in self.rows]


def paired_random_crop(weather: np.ndarray, clean: np.ndarray, size: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One crop window applied to both images; no implicit resizing."""
    h, w = weather.shape[:2]
    if weather.shape != clean.shape:
        raise ValueError("paired crop needs identically sized images")
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return (weather[y0:y0 + size, x0:x0 + size].copy(),
            clean[y0:y0 + size, x0:x0 + size].copy())


def _sample_box(h: int, w: int, rng: np.random.Generator,
                area_range: tuple[float, float]) -> tuple[int, int, int, int]:
    frac = rng.uniform(*area_range)
    side_y = max(1, round(h * np.sqrt(frac)))
    side_x = max(1, round(w * np.sqrt(frac)))
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    y0 = int(np.clip(round(cy - side_y / 2), 0, h - 1))
    x0 = int(np.clip(round(cx - side_x / 2), 0, w - 1))
    y1 = int(np.clip(y0 + side_y, 1, h))
    x1 = int(np.clip(x0 + side_x, 1, w))
    return y0, x0, y1, x1


def cutmix(sample_a: Sample, sample_b: Sample, rng: np.random.Generator,
           area_range: tuple[float, float] = (0.1, 0.5),
           box: tuple[int, int, int, int] | None = None) -> Sample:
    """Paste a rectangle of b into a (degraded AND clean, aligned).

    The new label mixes by the exact pasted pixel fraction, so label
    bookkeeping follows pixel counts, not the sampled target area.
    """
    if sample_a.weather.shape != sample_b.weather.shape:
        raise ValueError("cutmix needs equally sized samples")
    h, w = sample_a.weather.shape[:2]
    if box is None:
        box = _sample_box(h, w, rng, area_range)
    y0, x0, y1, x1 = box
    weather = sample_a.weather.copy()
    clean = sample_a.clean.copy()
    weather[y0:y1, x0:x1] = sample_b.weather[y0:y1, x0:x1]
    clean[y0:y1, x0:x1] = sample_b.clean[y0:y1, x0:x1]
    alpha = max(0, (y1 - y0)) * max(0, (x1 - x0)) / (h * w)
    label = (1.0 - alpha) * sample_a.label + alpha * sample_b.label
    return Sample(weather=weather, clean=clean, label=label)


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    stacked = np.stack(images).astype(np.float32)
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def make_batches(dataset, batch_size: int, cfg: AugmentConfig, seed: int, epoch: int = 0):
    """Yield shuffled, cropped, Cut-Mixed batches for one epoch.

    Batch order and contents depend only on (dataset, seed, epoch); the
    final partial batch is kept.  Each batch is a dict with float tensors
    ``weather``/``clean`` (B,3,S,S), ``labels`` (B,K) and a bool ``mixed``
    mask recording which elements were Cut-Mixed.
    """
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idxs = order[start:start + batch_size]
        cropped = []
        for idx in idxs:
            raw = dataset.sample(int(idx))
            weather, clean = paired_random_crop(raw.weather, raw.clean, cfg.crop, rng)
            cropped.append(Sample(weather=weather, clean=clean, label=raw.label.copy()))
        mixed_flags = []
        out = []
        for i, sample in enumerate(cropped):
            apply_mix = len(cropped) > 1 and rng.uniform() < cfg.cutmix_prob
            if apply_mix:
                partner = cropped[(i + 1) % len(cropped)]
                out.append(cutmix(sample, partner, rng, cfg.cutmix_area))
            else:
                out.append(sample)
            mixed_flags.append(apply_mix)
        yield {
            "weather": _to_tensor([s.weather for s in out]),
            "clean": _to_tensor([s.clean for s in out]),
            "labels": torch.from_numpy(np.stack([s.label for s in out]).astype(np.float32)),
            "mixed": torch.tensor(mixed_flags),
        }
