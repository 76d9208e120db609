"""Synthetic coarse/fine hierarchical data, CSV persistence, augmentation.

Coarse class centroids sit on a sphere of radius coarse_radius; each fine
sub-centroid is its parent plus a uniform direction scaled by fine_radius;
samples add isotropic Gaussian noise. The defaults give linearly separable
coarse classes with moderately overlapping sub-classes. Fine labels travel
with every sample but the training view exposes only the coarse ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import substream


@dataclass(frozen=True)
class HierarchySpec:
    n_coarse: int = 4
    subclasses: tuple[int, ...] = (4, 4, 4, 4)
    d_in: int = 64
    samples_per_fine: int = 200
    coarse_radius: float = 10.0
    fine_radius: float = 3.0
    noise_std: float = 1.0
    seed: int = 0

    def validate(self) -> "HierarchySpec":
        if self.n_coarse < 1 or self.d_in < 1 or self.samples_per_fine < 1:
            raise ConfigError("all counts must be >= 1")
        if len(self.subclasses) != self.n_coarse:
            raise ConfigError(
                f"subclasses has {len(self.subclasses)} entries for {self.n_coarse} coarse classes"
            )
        if any(k < 1 for k in self.subclasses):
            raise ConfigError("every coarse class needs >= 1 sub-class")
        if not self.fine_radius < self.coarse_radius:
            raise ConfigError(
                f"fine_radius {self.fine_radius} must be < coarse_radius {self.coarse_radius}"
            )
        if min(self.coarse_radius, self.fine_radius, self.noise_std) <= 0:
            raise ConfigError("radii and noise_std must be positive")
        if self.samples_per_fine < 10:
            raise ConfigError(
                f"samples_per_fine={self.samples_per_fine} cannot be split 80/10/10 "
                "(need >= 10 for stratification)"
            )
        return self


@dataclass
class Sample:
    features: np.ndarray  # (d_in,)
    coarse_label: int
    fine_label: int  # global index over all sub-classes


@dataclass
class Hierarchy:
    """Fine -> coarse map plus the generating centroids (in-memory only)."""

    parent: dict[int, int]
    coarse_centroids: np.ndarray | None = None  # (R, d_in)
    fine_centroids: np.ndarray | None = None    # (n_fine, d_in)

    @property
    def n_fine(self) -> int:
        return len(self.parent)

    @property
    def n_coarse(self) -> int:
        return max(self.parent.values()) + 1 if self.parent else 0

    def children(self, coarse: int) -> list[int]:
        return sorted(f for f, c in self.parent.items() if c == coarse)


@dataclass
class DatasetSplit:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]

    def all_samples(self) -> list[Sample]:
        return self.train + self.val + self.test


def generate_synthetic(spec: HierarchySpec) -> tuple[DatasetSplit, Hierarchy]:
    """Deterministic synthetic dataset; 80/10/10 split stratified by fine class."""
    spec.validate()
    rng = substream(spec.seed, "data")
    d = spec.d_in
    n_fine = sum(spec.subclasses)

    def unit_dirs(n):
        v = rng.standard_normal((n, d))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    coarse_centroids = unit_dirs(spec.n_coarse) * spec.coarse_radius
    parent: dict[int, int] = {}
    fine_centroids = np.empty((n_fine, d))
    f = 0
    for c, k in enumerate(spec.subclasses):
        dirs = unit_dirs(k)
        for j in range(k):
            fine_centroids[f] = coarse_centroids[c] + dirs[j] * spec.fine_radius
            parent[f] = c
            f += 1

    train: list[Sample] = []
    val: list[Sample] = []
    test: list[Sample] = []
    n = spec.samples_per_fine
    n_val = max(1, round(0.1 * n))
    n_test = max(1, round(0.1 * n))
    for f in range(n_fine):
        feats = fine_centroids[f] + rng.standard_normal((n, d)) * spec.noise_std
        order = rng.permutation(n)
        samples = [Sample(feats[i], parent[f], f) for i in order]
        test.extend(samples[:n_test])
        val.extend(samples[n_test : n_test + n_val])
        train.extend(samples[n_test + n_val :])
    hierarchy = Hierarchy(parent, coarse_centroids, fine_centroids)
    return DatasetSplit(train, val, test), hierarchy


def training_view(samples: list[Sample], use_fine: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """(features, labels) arrays for the trainer.

    Labels are coarse by default; use_fine=True is reserved for the two
    fine-supervised upper-bound presets.
    """
    X = np.stack([s.features for s in samples])
    labels = np.array(
        [s.fine_label if use_fine else s.coarse_label for s in samples], dtype=np.int64
    )
    return X, labels


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------


def save_csv(samples: list[Sample], path) -> None:
    """Header 'coarse,fine,f0,...'; features printed with %.17g (lossless)."""
    if not samples:
        raise DataFormatError("refusing to write an empty sample set")
    d = samples[0].features.shape[0]
    header = "coarse,fine," + ",".join(f"f{i}" for i in range(d))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for s in samples:
            feats = ",".join("%.17g" % v for v in s.features)
            fh.write(f"{s.coarse_label},{s.fine_label},{feats}\n")


def load_csv(path) -> list[Sample]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DataFormatError(f"{path}: empty file, expected a header row")
    header = lines[0].split(",")
    if header[:2] != ["coarse", "fine"] or len(header) < 3:
        raise DataFormatError(f"{path}: bad header {lines[0]!r}")
    width = len(header)
    samples: list[Sample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise DataFormatError(
                f"{path}:{lineno}: expected {width} columns, found {len(cells)}"
            )
        try:
            coarse = int(cells[0])
            fine = int(cells[1])
            feats = np.array([float(c) for c in cells[2:]])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        samples.append(Sample(feats, coarse, fine))
    return samples


def save_split(split: DatasetSplit, out_dir) -> dict[str, str]:
    """Write train/val/test CSVs into out_dir; returns name -> path."""
    import os

    paths = {}
    for name in ("train", "val", "test"):
        p = os.path.join(out_dir, f"{name}.csv")
        save_csv(getattr(split, name), p)
        paths[name] = p
    return paths


def load_split(data_dir) -> DatasetSplit:
    import os

    parts = {}
    for name in ("train", "val", "test"):
        p = os.path.join(data_dir, f"{name}.csv")
        if not os.path.exists(p):
            raise DataFormatError(f"missing dataset file {p}")
        parts[name] = load_csv(p)
    return DatasetSplit(**parts)


def save_hierarchy(hierarchy: Hierarchy, path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump({str(f): c for f, c in sorted(hierarchy.parent.items())}, fh, indent=0)
        fh.write("\n")


def load_hierarchy(path) -> Hierarchy:
    import json

    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        parent = {int(f): int(c) for f, c in raw.items()}
    except (ValueError, AttributeError) as exc:
        raise DataFormatError(f"{path}: malformed hierarchy file: {exc}") from None
    return Hierarchy(parent)


def hierarchy_from_samples(samples: list[Sample]) -> Hierarchy:
    parent: dict[int, int] = {}
    for s in samples:
        prev = parent.setdefault(s.fine_label, s.coarse_label)
        if prev != s.coarse_label:
            raise DataFormatError(
                f"fine label {s.fine_label} maps to both coarse {prev} and {s.coarse_label}"
            )
    return Hierarchy(parent)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentStrength:
    """Two stochastic views per sample: scale, coordinate dropout, noise."""

    noise_std: float = 0.5
    dropout_p: float = 0.1
    scale_lo: float = 0.8
    scale_hi: float = 1.25

    def validate(self) -> "AugmentStrength":
        if self.noise_std < 0:
            raise ConfigError("augment noise_std must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("augment dropout_p must be in [0, 1)")
        if not 0.0 < self.scale_lo <= self.scale_hi:
            raise ConfigError("augment scale range needs 0 < lo <= hi")
        return self

    @classmethod
    def identity(cls) -> "AugmentStrength":
        return cls(noise_std=0.0, dropout_p=0.0, scale_lo=1.0, scale_hi=1.0)


def augment(x: np.ndarray, rng: np.random.Generator, strength: AugmentStrength) -> np.ndarray:
    """x' = mask * (s * x) + noise. Draw order: scale, mask, noise."""
    strength.validate()
    x = np.asarray(x, dtype=np.float64)
    s = rng.uniform(strength.scale_lo, strength.scale_hi)
    mask = rng.random(x.shape) >= strength.dropout_p
    eps = rng.standard_normal(x.shape) * strength.noise_std
    return mask * (s * x) + eps


def augment_batch(X: np.ndarray, rng: np.random.Generator, strength: AugmentStrength) -> np.ndarray:
    """Row-wise augmentation of (n, d) with one scale draw per row."""
    strength.validate()
    X = np.asarray(X, dtype=np.float64)
    s = rng.uniform(strength.scale_lo, strength.scale_hi, size=(X.shape[0], 1))
    mask = rng.random(X.shape) >= strength.dropout_p
    eps = rng.standard_normal(X.shape) * strength.noise_std
    return mask * (s * X) + eps
