"""Spatial adapter: frozen features -> K activation maps -> K keypoints.

conv 3x3 (same padding) -> ReLU -> conv 1x1 -> spatial softmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .numerics import ShapeError

PARAM_NAMES = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias")
DEFAULT_C_MID = 64


@dataclass
class AdapterParams:
    conv1_weight: np.ndarray
    conv1_bias: np.ndarray
    conv2_weight: np.ndarray
    conv2_bias: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        c_mid, c_in, kh, kw = self.conv1_weight.shape
        k = self.conv2_weight.shape[0]
        if (kh, kw) != (3, 3):
            raise ShapeError(f"conv1 kernel must be 3x3, got {kh}x{kw}")
        if self.conv1_bias.shape != (c_mid,):
            raise ShapeError(f"conv1 bias shape {self.conv1_bias.shape} != ({c_mid},)")
        if self.conv2_weight.shape != (k, c_mid, 1, 1):
            raise ShapeError(f"conv2 weight shape {self.conv2_weight.shape} != ({k}, {c_mid}, 1, 1)")
        if self.conv2_bias.shape != (k,):
            raise ShapeError(f"conv2 bias shape {self.conv2_bias.shape} != ({k},)")

    @property
    def c_in(self) -> int:
        return self.conv1_weight.shape[1]

    @property
    def c_mid(self) -> int:
        return self.conv1_weight.shape[0]

    @property
    def k(self) -> int:
        return self.conv2_weight.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(PARAM_NAMES, (self.conv1_weight, self.conv1_bias, self.conv2_weight, self.conv2_bias)))

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray], seed: int | None = None) -> "AdapterParams":
        return cls(*(np.asarray(d[name], dtype=np.float64) for name in PARAM_NAMES), seed=seed)

    def copy(self) -> "AdapterParams":
        return AdapterParams.from_dict({k: v.copy() for k, v in self.as_dict().items()}, seed=self.seed)

    @staticmethod
    def expected_shapes(c_in: int, c_mid: int, k: int) -> dict[str, tuple[int, ...]]:
        return {
            "conv1.weight": (c_mid, c_in, 3, 3),
            "conv1.bias": (c_mid,),
            "conv2.weight": (k, c_mid, 1, 1),
            "conv2.bias": (k,),
        }


def init_params(c_in: int, c_mid: int, k: int, seed: int, zero_final: bool = False) -> AdapterParams:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases.

    ``zero_final=True`` zeroes the 1x1 stage so every map starts uniform and
    every keypoint starts at the image center.
    """
    if min(c_in, c_mid, k) < 1:
        raise ValueError(f"all dims must be >= 1, got c_in={c_in}, c_mid={c_mid}, k={k}")
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, np.sqrt(2.0 / (c_in * 9)), size=(c_mid, c_in, 3, 3))
    w2 = rng.normal(0.0, np.sqrt(2.0 / c_mid), size=(k, c_mid, 1, 1))
    if zero_final:
        w2[:] = 0.0
    return AdapterParams(w1, np.zeros(c_mid), w2, np.zeros(k), seed=seed)


@dataclass(frozen=True)
class KeypointAllocation:
    """Contiguous equal-size blocks: keypoint i belongs to entity i // subset_size."""

    m: int
    subset_size: int

    @property
    def k(self) -> int:
        return self.m * self.subset_size

    def entity_of(self, i: int) -> int:
        return i // self.subset_size

    def subset(self, entity: int) -> range:
        return range(entity * self.subset_size, (entity + 1) * self.subset_size)

    def assignment(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.subset_size)


def allocate_keypoints(k: int, m: int) -> KeypointAllocation:
    if m < 1:
        raise ValueError(f"entity count must be >= 1, got {m}")
    if k % m:
        raise ValueError(f"K={k} keypoints cannot be split evenly across M={m} entities")
    return KeypointAllocation(m=m, subset_size=k // m)


@dataclass
class KeypointSet:
    points: np.ndarray  # (K, 2) or (N, K, 2), normalized (x, y)
    allocation: KeypointAllocation = field(default=None)

    def __post_init__(self):
        if self.allocation is None:
            self.allocation = allocate_keypoints(self.points.shape[-2], 1)
        if self.points.shape[-2] != self.allocation.k:
            raise ShapeError(f"{self.points.shape[-2]} points but allocation covers {self.allocation.k}")

    def subset(self, entity: int) -> np.ndarray:
        r = self.allocation.subset(entity)
        return self.points[..., r.start : r.stop, :]


@dataclass
class AdapterCache:
    conv1: numerics.ForwardCache
    relu: numerics.ForwardCache
    conv2: numerics.ForwardCache
    softmax: numerics.ForwardCache


def adapter_forward(
    features: np.ndarray,
    params: AdapterParams,
    allocation: KeypointAllocation | None = None,
) -> tuple[KeypointSet, np.ndarray, AdapterCache]:
    """Run the adapter on (C, h, w) or (N, C, h, w) features."""
    features = np.asarray(features, dtype=np.float64)
    c = features.shape[-3] if features.ndim >= 3 else None
    if c != params.c_in:
        raise ShapeError(f"feature channels {c} != adapter C_in {params.c_in}")
    hidden, c1 = numerics.conv2d(features, params.conv1_weight, params.conv1_bias, padding="same")
    act, cr = numerics.relu(hidden)
    maps, c2 = numerics.conv2d(act, params.conv2_weight, params.conv2_bias, padding="same")
    points, cs = numerics.spatial_softmax(maps)
    return KeypointSet(points, allocation), maps, AdapterCache(c1, cr, c2, cs)


def adapter_backward(grad_points: np.ndarray, cache: AdapterCache) -> dict[str, np.ndarray]:
    """Parameter gradients; the features (frozen backbone output) get none."""
    g_maps = numerics.spatial_softmax_backward(grad_points, cache.softmax)
    g_act, g_w2, g_b2 = numerics.conv2d_backward(g_maps, cache.conv2)
    g_hidden = numerics.relu_backward(g_act, cache.relu)
    _, g_w1, g_b1 = numerics.conv2d_backward(g_hidden, cache.conv1, input_grad=False)
    return dict(zip(PARAM_NAMES, (g_w1, g_b1, g_w2, g_b2)))
