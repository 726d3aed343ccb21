"""Differentiable kernels with explicit forward/backward passes.

All tensors are float64 numpy arrays. Convolutions and the spatial softmax
accept a single sample (C, H, W) or a batch (N, C, H, W); the backward pass
returns gradients in the same layout as the forward inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent."""


class StaleCacheError(RuntimeError):
    """Raised when a forward cache is reused or fed to the wrong backward."""


@dataclass
class ForwardCache:
    op: str
    saved: dict
    out_shape: tuple
    consumed: bool = field(default=False)

    def take(self, op: str, grad_shape: tuple) -> dict:
        if self.op != op:
            raise StaleCacheError(f"cache was produced by {self.op!r}, not {op!r}")
        if self.consumed:
            raise StaleCacheError(f"{op} cache already consumed by a backward call")
        if tuple(grad_shape) != tuple(self.out_shape):
            raise ShapeError(
                f"{op}: grad_out shape {tuple(grad_shape)} != forward output shape {tuple(self.out_shape)}"
            )
        self.consumed = True
        return self.saved


def _as_batch(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"{name} must be (C, H, W) or (N, C, H, W), got ndim={x.ndim}")


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{op} produced non-finite values")


def conv2d(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    padding: str = "same",
    stride: int = 1,
) -> tuple[np.ndarray, ForwardCache]:
    """Cross-correlation of ``x`` with ``weights`` (Cout, Cin, kh, kw)."""
    xb, batched = _as_batch(x, "input")
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 4:
        raise ShapeError(f"weights must be (Cout, Cin, kh, kw), got ndim={weights.ndim}")
    cout, cin, kh, kw = weights.shape
    n, c, h, w = xb.shape
    if c != cin:
        raise ShapeError(f"Cin mismatch: input has {c} channels, weights expect {cin}")
    if kh not in (1, 3, 5) or kw not in (1, 3, 5):
        raise ShapeError(f"kernel extent {kh}x{kw} not in {{1, 3, 5}}")
    if bias.shape != (cout,):
        raise ShapeError(f"Cout mismatch: bias has shape {bias.shape}, expected ({cout},)")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if padding == "same":
        pad = kh // 2
        if kh != kw:
            raise ShapeError(f"'same' padding needs a square kernel, got {kh}x{kw}")
    elif padding == "none":
        pad = 0
    else:
        raise ValueError(f"padding must be 'same' or 'none', got {padding!r}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for a {kh}x{kw} kernel")

    cols = kernels.im2col(np.ascontiguousarray(xb), kh, kw, stride, pad)
    wmat = weights.reshape(cout, -1)
    out = wmat @ cols.reshape(cols.shape[0], n * ho * wo)
    out += bias[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    _check_finite(out, "conv2d")
    cache = ForwardCache(
        "conv2d",
        dict(cols=cols, weights=weights, in_shape=xb.shape, pad=pad, stride=stride, batched=batched),
        out.shape if batched else out.shape[1:],
    )
    return (out if batched else out[0]), cache


def conv2d_backward(
    grad_out: np.ndarray, cache: ForwardCache, input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of <grad_out, conv2d(x, W, b)> w.r.t. x, W and b.

    With ``input_grad=False`` the (comparatively expensive) input gradient is
    skipped and returned as None; used where the input is frozen.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    s = cache.take("conv2d", grad_out.shape)
    g = grad_out if s["batched"] else grad_out[None]
    n, c, h, w = s["in_shape"]
    weights = s["weights"]
    cout, cin, kh, kw = weights.shape
    gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
    cols = s["cols"]
    cols2 = cols.reshape(cols.shape[0], -1)
    grad_w = (gmat @ cols2.T).reshape(weights.shape)
    grad_b = gmat.sum(axis=1)
    grad_x = None
    if input_grad:
        gcols = (weights.reshape(cout, -1).T @ gmat).reshape(cols.shape)
        grad_x = kernels.col2im(gcols, n, c, h, w, kh, kw, s["stride"], s["pad"])
        if not s["batched"]:
            grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0)
    return out, ForwardCache("relu", dict(mask=x > 0.0), out.shape)


def relu_backward(grad_out: np.ndarray, cache: ForwardCache) -> np.ndarray:
    s = cache.take("relu", np.shape(grad_out))
    return np.where(s["mask"], grad_out, 0.0)


def spatial_softmax(maps: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Expected normalized (x, y) location under a per-channel softmax.

    Pixel column ``x`` of a width-``w`` map has coordinate ``(x + 0.5) / w``.
    Returns points of shape (K, 2) or (N, K, 2).
    """
    mb, batched = _as_batch(maps, "maps")
    n, k, h, w = mb.shape
    if h < 2 or w < 2:
        raise ShapeError(f"spatial_softmax needs h, w >= 2, got {h}x{w}")
    points, probs = kernels.spatial_softmax_forward(np.ascontiguousarray(mb))
    _check_finite(points, "spatial_softmax")
    cache = ForwardCache(
        "spatial_softmax",
        dict(probs=probs, points=points, hw=(h, w), batched=batched),
        points.shape if batched else points.shape[1:],
    )
    return (points if batched else points[0]), cache


def spatial_softmax_backward(grad_points: np.ndarray, cache: ForwardCache) -> np.ndarray:
    grad_points = np.asarray(grad_points, dtype=np.float64)
    s = cache.take("spatial_softmax", grad_points.shape)
    gp = grad_points if s["batched"] else grad_points[None]
    h, w = s["hw"]
    g = kernels.spatial_softmax_backward(np.ascontiguousarray(gp), s["probs"], s["points"], h, w)
    return g if s["batched"] else g[0]


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    at: np.ndarray,
    epsilon: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at``.

    If ``indices`` (flat positions) is given, only those entries are
    estimated and the rest of the result is NaN.
    """
    x = np.array(at, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.zeros(flat.shape)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(x)
        flat[i] = orig - epsilon
        fm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * epsilon)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation normalized by the larger gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    keep = ~np.isnan(b)
    a, b = a[keep], b[keep]
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
