"""Overlap and boundary-distance metrics for binary masks (2D or 3D)."""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"mask extents differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face-neighbour outside the mask (grid edge counts as outside)."""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def surface_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Nearest-neighbour distances from each boundary voxel of a to b's boundary, and vice versa."""
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return np.concatenate([d_ab, d_ba])


def hd95(a, b) -> float:
    """95th percentile (linear interpolation) of symmetric boundary-to-boundary distances."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise MetricError("hd95 is undefined for an empty mask")
    if np.array_equal(a, b):
        return 0.0
    return float(np.percentile(surface_distances(a, b), 95, method="linear"))


def hausdorff(a, b) -> float:
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise MetricError("Hausdorff distance is undefined for an empty mask")
    return float(surface_distances(a, b).max())
