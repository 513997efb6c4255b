"""Ground-truth density maps from head annotations.

A density map is a nonnegative 2-D raster whose sum is the object count.
Each annotated point contributes one Gaussian kernel, either with a fixed
standard deviation (low-congestion scenes) or a geometry-adaptive one,
``sigma_i = beta * mean distance to the k nearest annotated neighbors``
(congested scenes, where crowding shrinks apparent head size). Kernels are
evaluated at pixel centers, truncated at a radius of a few sigma, and by
default rescaled so the surviving in-image mass of every kernel is exactly
one; that makes count conservation a hard invariant rather than an
asymptotic one, including for points near borders.

All functions here are pure and operate on immutable inputs; rendering
different images concurrently is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, DimensionError

# Clamp range for adaptive sigmas: coincident annotations give a zero mean
# neighbor distance, which would degenerate the kernel.
SIGMA_MIN = 1.0
SIGMA_MAX = 50.0

GEOMETRY_ADAPTIVE = "geometry_adaptive"
FIXED = "fixed"


@dataclass(frozen=True)
class AnnotationSet:
    """Image extent plus head-point coordinates.

    Coordinates use the raster convention: origin at the top-left corner,
    x rightward, y downward, ``0 <= x < width`` and ``0 <= y < height``.
    An empty point list (zero-count image) is legal.
    """

    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"annotation extent must be positive, got {self.width}x{self.height}")
        if pts.size and not np.isfinite(pts).all():
            raise DataError("annotation points contain non-finite coordinates")
        if pts.size:
            x, y = pts[:, 0], pts[:, 1]
            if (x < 0).any() or (x >= self.width).any() or (y < 0).any() or (y >= self.height).any():
                raise DataError(
                    f"annotation points outside [0,{self.width})x[0,{self.height})")

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class KernelSpec:
    """How each annotated point becomes a Gaussian kernel."""

    mode: str = GEOMETRY_ADAPTIVE
    beta: float = 0.3
    k: int = 3
    fixed_sigma: float = 15.0
    truncation_radius_sigmas: float = 3.0
    normalize_mass: bool = True

    def __post_init__(self):
        if self.mode not in (GEOMETRY_ADAPTIVE, FIXED):
            raise ConfigError(f"unknown kernel mode {self.mode!r}")
        if self.beta <= 0 or self.k < 1 or self.fixed_sigma <= 0:
            raise ConfigError("kernel spec requires beta > 0, k >= 1, fixed_sigma > 0")
        if self.truncation_radius_sigmas <= 0:
            raise ConfigError("truncation_radius_sigmas must be > 0")


def knn_mean_distance(points: np.ndarray, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its k nearest other points.

    When fewer than k other points exist, averages over all of them. Needs
    at least two points; with one there is no neighbor distance and the
    caller must fall back to a fixed sigma.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n < 2:
        raise ConfigError(f"knn_mean_distance needs >= 2 points, got {n}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    kq = min(k, n - 1)
    # query k+1 and drop the self column (distance 0)
    dists, _ = cKDTree(pts).query(pts, k=kq + 1)
    return dists[:, 1:].mean(axis=1)


def adaptive_sigmas(points: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Per-point kernel sigmas for the given spec.

    Fixed mode ignores geometry entirely; adaptive mode scales the k-NN mean
    distance by beta and clamps to ``[SIGMA_MIN, SIGMA_MAX]``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if spec.mode == FIXED:
        return np.full(pts.shape[0], spec.fixed_sigma)
    return np.clip(spec.beta * knn_mean_distance(pts, spec.k), SIGMA_MIN, SIGMA_MAX)


def render_density(ann: AnnotationSet, spec: KernelSpec) -> np.ndarray:
    """Render the ground-truth density map for an annotation set.

    Returns a float64 ``[height, width]`` array: the sum of one truncated
    Gaussian per point, evaluated at pixel centers ``(col+0.5, row+0.5)``.
    With ``normalize_mass`` each kernel is rescaled to unit in-image mass,
    so the map sums to the point count; without it, kernels carry the
    continuous ``1/(2*pi*sigma^2)`` normalization and border truncation
    loses a little mass.
    """
    out = np.zeros((ann.height, ann.width))
    if len(ann) == 0:
        return out
    sigmas = adaptive_sigmas(ann.points, spec)
    for (px, py), sig in zip(ann.points, sigmas):
        radius = spec.truncation_radius_sigmas * sig
        c0 = max(int(math.floor(px - radius - 0.5)), 0)
        c1 = min(int(math.ceil(px + radius - 0.5)), ann.width - 1)
        r0 = max(int(math.floor(py - radius - 0.5)), 0)
        r1 = min(int(math.ceil(py + radius - 0.5)), ann.height - 1)
        cols = np.arange(c0, c1 + 1) + 0.5
        rows = np.arange(r0, r1 + 1) + 0.5
        d2 = (cols - px)[None, :] ** 2 + (rows - py)[:, None] ** 2
        kern = np.exp(-d2 / (2.0 * sig * sig))
        kern[d2 > radius * radius] = 0.0
        if spec.normalize_mass:
            kern /= kern.sum()
        else:
            kern /= 2.0 * math.pi * sig * sig
        out[r0:r1 + 1, c0:c1 + 1] += kern
    return out


def sum_pool_resample(density: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a map by summing factor x factor blocks.

    The total count is preserved exactly; extents must divide by ``factor``.
    """
    if factor < 1:
        raise ConfigError(f"resample factor must be >= 1, got {factor}")
    if factor == 1:
        return np.array(density, copy=True)
    d = np.asarray(density)
    if d.ndim != 2:
        raise DimensionError(f"sum_pool_resample expects a 2-D map, got shape {d.shape}")
    h, w = d.shape
    if h % factor or w % factor:
        raise DimensionError(
            f"sum_pool_resample: extents {h}x{w} not divisible by factor {factor}")
    return d.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))


def count(density: np.ndarray) -> float:
    """Crowd count of a density map: the sum of its values."""
    return float(np.asarray(density).sum(dtype=np.float64))
