"""Seeded synthetic labeled hyperspectral cubes for desk-scale verification.

A phantom imitates the structure of mid-infrared tissue images: a handful of
spatially contiguous classes, each with a characteristic absorbance spectrum
that shares a dominant smooth envelope with the others and differs in a set
of minor peaks. That makes the cube strongly compressible in a PCA basis
(like real FTIR data) while keeping the classes separable for the
classification metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hypercube import HyperCube

__all__ = ["PhantomSpec", "LabelMap", "generate_phantom"]


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a synthetic labeled cube. Same seed, same output."""

    width: int = 64
    height: int = 64
    n_bands: int = 60
    wavenumber_range: tuple[float, float] = (900.0, 1800.0)
    n_classes: int = 4
    peaks_per_class: int = 5
    noise_sigma: float = 0.01
    seed: int = 0
    scale_jitter: float = 0.10  # per-pixel uniform scale jitter, +-fraction; 0 disables

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("phantom dimensions must be >= 1")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.peaks_per_class < 1:
            raise ValueError("peaks_per_class must be >= 1")
        if self.n_bands < 2 * self.peaks_per_class:
            raise ValueError("n_bands must be >= 2 * peaks_per_class so peaks are resolvable")
        lo, hi = self.wavenumber_range
        if not lo < hi:
            raise ValueError("wavenumber_range must be (low, high) with low < high")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.scale_jitter < 1:
            raise ValueError("scale_jitter must be in [0, 1)")
        if self.n_classes > self.width * self.height:
            raise ValueError("more classes than pixels")


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class labels with class names."""

    labels: np.ndarray  # (height, width) int
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError("labels must be a 2-D map")
        if labels.min() < 0 or labels.max() >= len(self.class_names):
            raise ValueError("labels must lie in [0, n_classes)")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def _gaussian(axis: np.ndarray, center: float, width: float, amplitude: float) -> np.ndarray:
    return amplitude * np.exp(-0.5 * ((axis - center) / width) ** 2)


def _voronoi_labels(rng: np.random.Generator, width: int, height: int, k: int) -> np.ndarray:
    flat = rng.choice(width * height, size=k, replace=False)
    sites = np.stack([flat % width, flat // width], axis=1)  # (k, 2) as (x, y)
    # canonical class order: scanline order of the sites
    order = np.lexsort((sites[:, 0], sites[:, 1]))
    sites = sites[order]
    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    d2 = (xs[None] - sites[:, 0, None, None]) ** 2 + (ys[None] - sites[:, 1, None, None]) ** 2
    return np.argmin(d2, axis=0)  # ties resolve to the lower class index


def _signatures(rng: np.random.Generator, spec: PhantomSpec, axis: np.ndarray) -> np.ndarray:
    lo, hi = spec.wavenumber_range
    span = hi - lo
    step = span / max(spec.n_bands - 1, 1)

    # shared smooth envelope: two broad bumps plus a gentle slope and offset
    envelope = np.full_like(axis, 0.15)
    for _ in range(2):
        center = rng.uniform(lo + 0.2 * span, hi - 0.2 * span)
        width = rng.uniform(12.0, 22.0) * step
        amplitude = rng.uniform(0.5, 0.9)
        envelope += _gaussian(axis, center, width, amplitude)
    envelope += rng.uniform(-0.05, 0.05) * (axis - lo) / span

    signatures = np.empty((spec.n_classes, spec.n_bands))
    for k in range(spec.n_classes):
        sig = envelope.copy()
        for _ in range(spec.peaks_per_class):
            center = rng.uniform(lo + 0.025 * span, hi - 0.025 * span)
            width = rng.uniform(3.0, 10.0) * step  # widths in [3, 10] axis steps
            amplitude = rng.uniform(0.04, 0.16)
            sig += _gaussian(axis, center, width, amplitude)
        signatures[k] = sig
    return signatures


def generate_phantom(spec: PhantomSpec) -> tuple[HyperCube, LabelMap]:
    """Generate a seeded phantom cube and its ground-truth label map.

    The spatial layout is a Voronoi partition seeded with one site per class
    (cells are convex, hence contiguous); classes are numbered by the
    scanline order of their sites so the labeling is deterministic. Each
    pixel carries its class signature scaled by per-pixel jitter, plus white
    Gaussian noise.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.wavenumber_range
    axis = np.linspace(lo, hi, spec.n_bands)

    labels = _voronoi_labels(rng, spec.width, spec.height, spec.n_classes)
    signatures = _signatures(rng, spec, axis)

    jitter = spec.scale_jitter * rng.uniform(-1.0, 1.0, size=(spec.height, spec.width))
    values = signatures.T[:, labels]  # (n_bands, height, width)
    values = values * (1.0 + jitter)[None, :, :]
    if spec.noise_sigma > 0:
        values = values + rng.normal(0.0, spec.noise_sigma, size=values.shape)

    cube = HyperCube(values=values, wavenumbers=axis)
    names = tuple(f"class-{k}" for k in range(spec.n_classes))
    return cube, LabelMap(labels=labels, class_names=names)
