"""SLIC superpixel clustering over stacks of band images.

Localized k-means in a joint color/position space: each band image is
Gaussian-smoothed and min-max normalized, pixels carry the stacked band
values as their color feature, and the distance to a cluster center is

    D^2 = d_color^2 + (d_spatial / S)^2 * m^2

with S = sqrt(n_pixels / k) the grid interval and m the compactness factor.
Centers start on a regular grid, are nudged to the lowest-gradient spot in a
3x3 neighborhood, and are refined with a 2S x 2S search window. Disconnected
leftovers are merged into the largest adjacent region afterwards, so every
superpixel is 4-connected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .hypercube import BandStack

__all__ = ["SuperpixelMap", "slic", "superpixel_centers"]

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)  # 4-connectivity


@dataclass(frozen=True)
class SuperpixelMap:
    """Partition of an image into superpixels with one center pixel each."""

    labels: np.ndarray  # (height, width) int, values in [0, k_actual)
    centers: tuple[tuple[int, int], ...]  # (x, y), one per label
    k_requested: int
    k_actual: int

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        centers = tuple((int(x), int(y)) for x, y in self.centers)
        if self.k_actual != len(centers):
            raise ValueError("k_actual must equal the number of centers")
        if self.k_actual > self.k_requested:
            raise ValueError("k_actual cannot exceed k_requested")
        present = np.unique(labels)
        if present.size != self.k_actual or present[0] != 0 or present[-1] != self.k_actual - 1:
            raise ValueError("labels must cover exactly 0..k_actual-1")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "centers", centers)


def _band_features(stack: BandStack, smoothing_sigma: float) -> np.ndarray:
    """Smoothed, per-band min-max normalized features, shape (height, width, n_bands)."""
    feats = np.empty((stack.height, stack.width, stack.n_selected))
    for i in range(stack.n_selected):
        img = stack.images[i]
        if smoothing_sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=smoothing_sigma)
        lo, hi = img.min(), img.max()
        feats[:, :, i] = (img - lo) / (hi - lo) if hi > lo else 0.0
    return feats


def _grid_centers(width: int, height: int, k: int) -> np.ndarray:
    n_y = int(round(np.sqrt(k * height / width)))
    n_y = min(max(n_y, 1), k, height)
    n_x = min(max(k // n_y, 1), width)
    cx = ((np.arange(n_x) + 0.5) * width / n_x).astype(int)
    cy = ((np.arange(n_y) + 0.5) * height / n_y).astype(int)
    gx, gy = np.meshgrid(cx, cy)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)  # (n_centers, 2) as (x, y)


def _perturb_to_lowest_gradient(centers: np.ndarray, feats: np.ndarray) -> np.ndarray:
    grad = np.zeros(feats.shape[:2])
    for f in range(feats.shape[2]):
        gy, gx = np.gradient(feats[:, :, f])
        grad += gx**2 + gy**2
    height, width = grad.shape
    out = centers.copy()
    for i, (x, y) in enumerate(centers):
        x0, x1 = max(0, x - 1), min(width, x + 2)
        y0, y1 = max(0, y - 1), min(height, y + 2)
        window = grad[y0:y1, x0:x1]
        dy, dx = np.unravel_index(np.argmin(window), window.shape)
        out[i] = (x0 + dx, y0 + dy)
    # drop duplicates, keeping first occurrence order
    seen: set[tuple[int, int]] = set()
    keep = []
    for i, (x, y) in enumerate(out):
        if (x, y) not in seen:
            seen.add((x, y))
            keep.append(i)
    return out[keep]


def _assign(
    feats: np.ndarray,
    center_pos: np.ndarray,
    center_feat: np.ndarray,
    interval: float,
    compactness: float,
) -> np.ndarray:
    height, width, _ = feats.shape
    dist = np.full((height, width), np.inf)
    labels = np.full((height, width), -1, dtype=np.int64)
    half = max(int(np.ceil(interval)), 1)
    ratio = (compactness / interval) ** 2
    for idx in range(center_pos.shape[0]):
        cx, cy = center_pos[idx]
        x0, x1 = max(0, int(cx) - half), min(width, int(cx) + half + 1)
        y0, y1 = max(0, int(cy) - half), min(height, int(cy) + half + 1)
        d_color = np.sum((feats[y0:y1, x0:x1, :] - center_feat[idx]) ** 2, axis=2)
        xs = np.arange(x0, x1) - cx
        ys = np.arange(y0, y1) - cy
        d_space = ys[:, None] ** 2 + xs[None, :] ** 2
        d2 = d_color + ratio * d_space
        window = dist[y0:y1, x0:x1]
        better = d2 < window
        window[better] = d2[better]
        labels[y0:y1, x0:x1][better] = idx
    unassigned = labels < 0
    if np.any(unassigned):
        ys, xs = np.nonzero(unassigned)
        d2 = (xs[:, None] - center_pos[None, :, 0]) ** 2 + (ys[:, None] - center_pos[None, :, 1]) ** 2
        labels[ys, xs] = np.argmin(d2, axis=1)
    return labels


def _update_centers(
    labels: np.ndarray, feats: np.ndarray, n_centers: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    height, width, n_feat = feats.shape
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n_centers).astype(float)
    xs = np.tile(np.arange(width), height).astype(float)
    ys = np.repeat(np.arange(height), width).astype(float)
    nonempty = counts > 0
    pos = np.zeros((n_centers, 2))
    pos[nonempty, 0] = np.bincount(flat, weights=xs, minlength=n_centers)[nonempty] / counts[nonempty]
    pos[nonempty, 1] = np.bincount(flat, weights=ys, minlength=n_centers)[nonempty] / counts[nonempty]
    feat = np.zeros((n_centers, n_feat))
    flat_feats = feats.reshape(-1, n_feat)
    for f in range(n_feat):
        feat[nonempty, f] = (
            np.bincount(flat, weights=flat_feats[:, f], minlength=n_centers)[nonempty]
            / counts[nonempty]
        )
    return pos, feat, nonempty


def _enforce_connectivity(labels: np.ndarray, max_passes: int = 100) -> np.ndarray:
    """Merge non-main connected components into the largest adjacent region."""
    labels = labels.copy()
    for _ in range(max_passes):
        counts = np.bincount(labels.ravel(), minlength=labels.max() + 1)
        orphans = []
        for lab in np.unique(labels):
            comps, n_comp = ndimage.label(labels == lab, structure=_CROSS)
            if n_comp <= 1:
                continue
            sizes = np.bincount(comps.ravel())[1:]
            main = int(np.argmax(sizes)) + 1  # ties: keep the first-labeled component
            for c in range(1, n_comp + 1):
                if c != main:
                    orphans.append(comps == c)
        if not orphans:
            return labels
        for mask in orphans:
            ring = ndimage.binary_dilation(mask, structure=_CROSS) & ~mask
            neighbor_labels = np.unique(labels[ring])
            own = labels[mask][0]
            neighbor_labels = neighbor_labels[neighbor_labels != own]
            if neighbor_labels.size == 0:
                continue
            target = neighbor_labels[np.argmax(counts[neighbor_labels])]
            labels[mask] = target
            counts = np.bincount(labels.ravel(), minlength=counts.size)
    return labels


def slic(
    band_images: BandStack,
    k: int,
    compactness: float = 0.03,
    smoothing_sigma: float = 5.0,
    iterations: int = 10,
) -> SuperpixelMap:
    """Cluster the image plane into at most ``k`` 4-connected superpixels."""
    if band_images.n_selected < 1:
        raise ValueError("need at least one band image")
    height, width = band_images.height, band_images.width
    n_pixels = height * width
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_pixels:
        raise ValueError(f"k = {k} exceeds the number of pixels ({n_pixels})")

    feats = _band_features(band_images, smoothing_sigma)
    interval = float(np.sqrt(n_pixels / k))

    center_pos = _grid_centers(width, height, k).astype(float)
    center_pos = _perturb_to_lowest_gradient(center_pos.astype(int), feats).astype(float)
    center_feat = feats[center_pos[:, 1].astype(int), center_pos[:, 0].astype(int), :]

    labels = _assign(feats, center_pos, center_feat, interval, compactness)
    for _ in range(max(iterations, 1)):
        pos, feat, nonempty = _update_centers(labels, feats, center_pos.shape[0])
        if not np.all(nonempty):
            # dropped (merged-away) centers shrink the cluster count
            remap = np.cumsum(nonempty) - 1
            labels = remap[labels]
            pos, feat = pos[nonempty], feat[nonempty]
        center_pos, center_feat = pos, feat
        labels = _assign(feats, center_pos, center_feat, interval, compactness)

    labels = _enforce_connectivity(labels)

    # compact label ids, preserving center order
    present = np.unique(labels)
    remap = np.zeros(labels.max() + 1, dtype=np.int64)
    remap[present] = np.arange(present.size)
    labels = remap[labels]

    centers = []
    for lab in range(present.size):
        ys, xs = np.nonzero(labels == lab)
        cx = int(np.floor(xs.mean() + 0.5))
        cy = int(np.floor(ys.mean() + 0.5))
        centers.append((cx, cy))

    return SuperpixelMap(
        labels=labels, centers=tuple(centers), k_requested=k, k_actual=present.size
    )


def superpixel_centers(
    spmap: SuperpixelMap, existing: list[tuple[int, int]] | tuple[tuple[int, int], ...] = ()
) -> list[tuple[int, int]]:
    """Centers not yet sampled, in label order; duplicates within the map collapse too."""
    taken = {(int(x), int(y)) for x, y in existing}
    out: list[tuple[int, int]] = []
    for x, y in spmap.centers:
        if (x, y) not in taken:
            taken.add((x, y))
            out.append((x, y))
    return out
