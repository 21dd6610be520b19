"""Synthetic trimodal feeding-intensity data and the stratified split.

The generator stands in for a private recording set.  Every sample carries
a latent class y and, per modality, a scalar intensity

    a_m = snr_m * LEVELS[y] + e_m,      corr(e_m, e_m') = rho

that scales a class-independent, unit-mean pattern in the modality's map:
Gaussian blobs for the image, a band of mel rows for the audio, a
positive-envelope oscillation for the wave.  Pixel noise is added on top.
With unit-variance e_m, snr_m sets how separable the modality is on its own.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .preprocess import CLASSES
from .records import read_records, write_records
from .tensor import ConfigurationError

LEVELS = np.array([1.0, 0.5, 0.0])          # strong, weak, none
MODALITY_NAMES = ("image", "audio", "wave")
MAP_CHANNELS = (3, 2, 1)
_IMAGE_TINT = np.array([1.0, 0.8, 0.6])


@dataclass
class SynthConfig:
    n_samples: int = 7089
    class_ratio: tuple[float, ...] = (1.0, 1.0, 1.0)
    snr_image: float = 4.0
    snr_audio: float = 3.2
    snr_wave: float = 2.6
    rho: float = 0.05
    pixel_noise: float = 0.3
    map_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.class_ratio = tuple(float(c) for c in self.class_ratio)
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be positive, got {self.n_samples}")
        if len(self.class_ratio) != len(CLASSES) or min(self.class_ratio) < 0 or sum(self.class_ratio) <= 0:
            raise ConfigurationError(f"class_ratio must be {len(CLASSES)} non-negative weights")
        for name in ("snr_image", "snr_audio", "snr_wave"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        if self.pixel_noise < 0:
            raise ConfigurationError("pixel_noise must be non-negative")
        if self.map_size < 16:
            raise ConfigurationError(f"map_size must be at least 16, got {self.map_size}")

    @property
    def snr(self) -> tuple[float, float, float]:
        return (self.snr_image, self.snr_audio, self.snr_wave)


@dataclass
class ModalSample:
    image: np.ndarray
    audio: np.ndarray
    wave: np.ndarray
    label: int

    def maps(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.image, self.audio, self.wave)


@dataclass
class Dataset:
    """Column store of maps: one (n, C, S, S) array per modality."""

    maps: tuple[np.ndarray, np.ndarray, np.ndarray]
    labels: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        self.ids = np.asarray(self.ids, dtype=np.int64)
        for m in self.maps:
            if len(m) != len(self.labels):
                raise ValueError("map arrays and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ModalSample:
        return ModalSample(*(m[i] for m in self.maps), int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(tuple(m[idx] for m in self.maps), self.labels[idx], self.ids[idx])

    def class_counts(self, n_classes: int = len(CLASSES)) -> list[int]:
        return np.bincount(self.labels, minlength=n_classes).tolist()


def balanced_counts(n: int, ratio: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; leftovers go to the earliest classes."""
    total = sum(ratio)
    exact = [n * r / total for r in ratio]
    counts = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(ratio)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _correlated_noise(rng: np.random.Generator, n: int, rho: float) -> np.ndarray:
    shared = rng.standard_normal(n)
    own = rng.standard_normal((3, n))
    return math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own


def _grid(size: int):
    t = (np.arange(size) + 0.5) / size
    return np.meshgrid(t, t, indexing="ij")


def _image_pattern(rng, n: int, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    out = np.zeros((n, size, size))
    for _ in range(2):
        cy, cx = rng.uniform(0.2, 0.8, (2, n))
        s = rng.uniform(0.1, 0.18, n)
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        out += np.exp(-d2 / (2 * s[:, None, None] ** 2))
    return out[:, None] * _IMAGE_TINT[None, :, None, None]


def _audio_pattern(rng, n: int, size: int) -> np.ndarray:
    rows = np.arange(size)[None, :]
    centre = rng.uniform(0.25, 0.75, n)[:, None] * size
    width = rng.uniform(1.5, 3.0, n)[:, None]
    band = np.exp(-((rows - centre) ** 2) / (2 * width**2))            # (n, S) over mel rows
    time = 0.75 + 0.25 * np.sin(2 * np.pi * rng.uniform(1, 3, n)[:, None] * np.arange(size)[None] / size)
    mel = band[:, :, None] * time[:, None, :]
    return np.stack([mel, 0.5 * mel], axis=1)


def _wave_pattern(rng, n: int, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    f = rng.uniform(2, 5, n)[:, None, None]
    phase = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    return (0.5 + 0.5 * np.sin(2 * np.pi * f * xx[None] + phase))[:, None] * np.ones((1, 1, size, size))


_PATTERNS = (_image_pattern, _audio_pattern, _wave_pattern)


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic trimodal dataset; class order is shuffled by the seed."""
    rng = np.random.default_rng(cfg.seed)
    counts = balanced_counts(cfg.n_samples, cfg.class_ratio)
    labels = rng.permutation(np.repeat(np.arange(len(CLASSES)), counts))
    n, S = cfg.n_samples, cfg.map_size
    noise = _correlated_noise(rng, n, cfg.rho)
    maps = []
    for m, pattern in enumerate(_PATTERNS):
        amp = cfg.snr[m] * LEVELS[labels] + noise[m]
        pat = pattern(rng, n, S)
        pat = pat / pat.mean(axis=(1, 2, 3), keepdims=True)
        x = amp[:, None, None, None] * pat
        x = x + cfg.pixel_noise * rng.standard_normal(x.shape)
        maps.append(x)
    return Dataset(tuple(maps), labels)


def split_counts(n_c: int, ratios: Sequence[int] = (8, 1, 1)) -> tuple[int, int, int]:
    """(train, val, test) sizes for one class.

    val and test take ceil(share * n_c) each, computed in exact rationals;
    train keeps the rest.
    """
    total = sum(ratios)
    n_val = math.ceil(Fraction(n_c * ratios[1], total))
    n_test = math.ceil(Fraction(n_c * ratios[2], total))
    n_train = n_c - n_val - n_test
    if n_train < 1 or n_c < 3:
        raise ConfigurationError(f"class with {n_c} samples is too small to split {tuple(ratios)}")
    return n_train, n_val, n_test


def _as_ratio(ratios) -> tuple[int, int, int]:
    fr = [Fraction(str(r)) for r in ratios]
    if len(fr) != 3 or min(fr) <= 0:
        raise ConfigurationError(f"split needs three positive shares, got {tuple(ratios)}")
    if any(r < 1 for r in fr) and sum(fr) != 1:
        raise ConfigurationError(f"split shares must sum to 1, got {tuple(ratios)}")
    den = math.lcm(*(r.denominator for r in fr))
    return tuple(int(r * den) for r in fr)


def split_indices(labels, ratios=(8, 1, 1), seed: int = 0):
    labels = np.asarray(labels)
    ratio = _as_ratio(ratios)
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train, n_val, _ = split_counts(len(idx), ratio)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def split_dataset(dataset: Dataset, ratios=(8, 1, 1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    return tuple(dataset.subset(i) for i in split_indices(dataset.labels, ratios, seed))


# -- on-disk form -------------------------------------------------------------------------

def save_dataset(ds: Dataset, out_dir: str | Path, extra: dict | None = None) -> dict:
    records = ((ds.maps[0][i], ds.maps[1][i], ds.maps[2][i], np.array(ds.ids[i], dtype=np.float64))
               for i in range(len(ds)))
    extra = {"labels": ds.labels.tolist(), **(extra or {})}
    return write_records(out_dir, MODALITY_NAMES + ("id",), records, ds.labels.tolist(), len(CLASSES), extra)


def load_dataset(path: str | Path) -> tuple[Dataset, dict]:
    recs, manifest = read_records(path)
    if not recs:
        return Dataset(tuple(np.zeros((0, c, 16, 16)) for c in MAP_CHANNELS), np.zeros(0)), manifest
    maps = tuple(np.stack([r[name] for r in recs]) for name in MODALITY_NAMES)
    ids = np.array([int(r["id"]) for r in recs])
    return Dataset(maps, manifest["labels"], ids), manifest


def synth_config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["class_ratio"] = list(d["class_ratio"])
    return d
