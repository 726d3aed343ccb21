"""Mask-supervised geometric objective on keypoint subsets.

Per entity subset: centroid alignment, spread matching a mask-area-derived
radius, and a nearest-neighbour separation hinge. All coordinates are
normalized to [0, 1]; mask areas are occupied-cell fractions.

Subgradient conventions where the objective is not differentiable:

* a point sitting exactly on the subset mean gets zero gradient from its own
  distance term in the spread loss;
* nearest-neighbour ties go to the lowest index;
* for a coincident pair (k, j) the separation direction p_k - p_j is taken as
  +x when k > j and -x otherwise, so the pair is pushed apart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .adapter import KeypointSet
from .numerics import ShapeError


class EmptyMaskError(ValueError):
    pass


def mask_centroid_and_area(grid: np.ndarray) -> tuple[tuple[float, float], float]:
    grid = np.asarray(grid, dtype=bool)
    if grid.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got ndim={grid.ndim}")
    h, w = grid.shape
    ys, xs = np.nonzero(grid)
    if xs.size == 0:
        raise EmptyMaskError("mask has no occupied cells")
    cx = float(((xs + 0.5) / w).mean())
    cy = float(((ys + 0.5) / h).mean())
    return (cx, cy), xs.size / (h * w)


@dataclass(frozen=True)
class EntityMask:
    grid: np.ndarray
    centroid: tuple[float, float]
    area: float

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "EntityMask":
        grid = np.asarray(grid, dtype=bool)
        c, a = mask_centroid_and_area(grid)
        return cls(grid, c, a)


def sigma_target(area: float) -> float:
    """Target mean keypoint distance from the centroid for a mask of ``area``."""
    if not area > 0.0:
        raise ValueError(f"mask area must be > 0, got {area}")
    return 0.8 * math.sqrt(area / math.pi)


@dataclass(frozen=True)
class GapWeights:
    lambda_c: float = 0.3
    lambda_s: float = 0.5
    lambda_d: float = 2.0
    delta_min: float = 0.15

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_s, self.lambda_d) < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 < self.delta_min < 1.0:
            raise ValueError(f"delta_min must lie in (0, 1), got {self.delta_min}")


def loss_center(points: np.ndarray, c) -> tuple[float, np.ndarray]:
    p = np.asarray(points, dtype=np.float64)
    off = p.mean(axis=0) - np.asarray(c, dtype=np.float64)
    value = float(off @ off)
    grad = np.broadcast_to(2.0 * off / len(p), p.shape).copy()
    return value, grad


def loss_spread(points: np.ndarray, sigma_tgt: float) -> tuple[float, np.ndarray]:
    """(mean distance to the subset mean - sigma_tgt)^2.

    A single point has zero spread; the loss is then sigma_tgt^2 with zero
    gradient.
    """
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    rel = p - p.mean(axis=0)
    dist = np.sqrt((rel**2).sum(axis=1))
    gap = dist.mean() - sigma_tgt
    u = np.zeros_like(rel)
    nz = dist > 0.0
    u[nz] = rel[nz] / dist[nz, None]
    grad = (2.0 * gap / n) * (u - u.mean(axis=0))
    return float(gap**2), grad


def _nearest(p: np.ndarray, i: int) -> tuple[int, float]:
    best, dmin = -1, math.inf
    for j in range(len(p)):
        if j == i:
            continue
        d = math.hypot(p[i, 0] - p[j, 0], p[i, 1] - p[j, 1])
        if d < dmin:
            best, dmin = j, d
    return best, dmin


def loss_div(points: np.ndarray, delta_min: float) -> tuple[float, np.ndarray]:
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    if n < 2:
        raise ValueError("diversity loss needs at least two points")
    grad = np.zeros_like(p)
    total = 0.0
    for i in range(n):
        j, d = _nearest(p, i)
        hinge = delta_min - d
        if hinge <= 0.0:
            continue
        total += hinge * hinge
        e = (p[i] - p[j]) / d if d > 0.0 else np.array([1.0 if i > j else -1.0, 0.0])
        grad[i] -= (2.0 * hinge / n) * e
        grad[j] += (2.0 * hinge / n) * e
    return total / n, grad


@dataclass
class EntityLoss:
    center: float
    spread: float
    div: float
    total: float


@dataclass
class LossBreakdown:
    entities: list[EntityLoss]
    total: float
    grad: np.ndarray = field(repr=False)

    def mean_terms(self) -> tuple[float, float, float, float]:
        m = len(self.entities)
        return (
            sum(e.center for e in self.entities) / m,
            sum(e.spread for e in self.entities) / m,
            sum(e.div for e in self.entities) / m,
            self.total,
        )


def _check_masks(masks, m: int) -> None:
    if len(masks) != m:
        raise ShapeError(f"{len(masks)} masks supplied for an allocation over M={m} entities")
    for mk in masks:
        h, w = mk.grid.shape
        if h != w:
            raise ShapeError(f"mask grid must be square for an isotropic target, got {h}x{w}")
        if not mk.area > 0.0:
            raise EmptyMaskError("mask has no occupied cells")


def loss_gap(keypoints: KeypointSet, masks: list[EntityMask], weights: GapWeights = GapWeights()) -> LossBreakdown:
    """Weighted objective per entity subset; aggregate is the mean over entities."""
    alloc = keypoints.allocation
    _check_masks(masks, alloc.m)
    pts = np.asarray(keypoints.points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError("loss_gap takes a single (K, 2) keypoint set; use loss_gap_batch for batches")
    grad = np.zeros_like(pts)
    entities = []
    for e, mk in enumerate(masks):
        r = alloc.subset(e)
        sub = pts[r.start : r.stop]
        vc, gc = loss_center(sub, mk.centroid)
        vs, gs = loss_spread(sub, sigma_target(mk.area))
        vd, gd = loss_div(sub, weights.delta_min) if len(sub) >= 2 else (0.0, np.zeros_like(sub))
        tot = weights.lambda_c * vc + weights.lambda_s * vs + weights.lambda_d * vd
        grad[r.start : r.stop] = (weights.lambda_c * gc + weights.lambda_s * gs + weights.lambda_d * gd) / alloc.m
        entities.append(EntityLoss(vc, vs, vd, tot))
    total = sum(e.total for e in entities) / alloc.m
    return LossBreakdown(entities, total, grad)


def loss_gap_batch(
    points: np.ndarray,
    centroids: np.ndarray,
    areas: np.ndarray,
    weights: GapWeights = GapWeights(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched objective for training.

    points (N, K, 2), centroids (N, M, 2), areas (N, M). Returns
    (terms (N, M, 3), totals (N,), grad (N, K, 2)); terms hold the raw
    (center, spread, div) values, totals the weighted entity mean.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    areas = np.asarray(areas, dtype=np.float64)
    n, k, _ = points.shape
    m = centroids.shape[1]
    if k % m:
        raise ShapeError(f"K={k} not divisible by M={m}")
    if areas.shape != (n, m) or centroids.shape != (n, m, 2):
        raise ShapeError(f"centroids {centroids.shape} / areas {areas.shape} do not match N={n}, M={m}")
    if np.any(areas <= 0.0):
        raise EmptyMaskError("mask has no occupied cells")
    sig = np.ascontiguousarray(0.8 * np.sqrt(areas / math.pi))
    terms, grad = kernels.gap_loss_batch(
        points, centroids, sig, weights.lambda_c, weights.lambda_s, weights.lambda_d, weights.delta_min
    )
    lam = np.array([weights.lambda_c, weights.lambda_s, weights.lambda_d])
    totals = (terms @ lam).mean(axis=1)
    return terms, totals, grad
