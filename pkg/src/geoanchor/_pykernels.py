"""Pure numpy implementations of the hot kernels.

Mirrors the interface of the compiled ``_ckernels`` module exactly; used when
the extension is unavailable or when ``GAP_KERNELS=python`` is set.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def im2col(x, kh, kw, stride, pad):
    """Gather conv patches of ``x`` (N, C, H, W) into (C*kh*kw, N, Ho*Wo)."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * ho : stride, : stride * wo : stride]
    # (n, c, ho, wo, kh, kw) -> (c, kh, kw, n, ho, wo)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n, ho * wo)
    return np.ascontiguousarray(cols, dtype=np.float64)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Scatter-add (C*kh*kw, N, Ho*Wo) patches back onto an (N, C, H, W) grid."""
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ky in range(kh):
        for kx in range(kw):
            patch = cols6[:, ky, kx].transpose(1, 0, 2, 3)
            out[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += patch
    return np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w])


def _grid(h, w):
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    cx = np.tile(xs, h)
    cy = np.repeat(ys, w)
    return cx, cy


def _mirrored_mean(marg, size):
    """0.5 + sum over mirrored index pairs of (q_i - q_mirror) * (centered coord).

    Equal weights cancel pairwise, so a uniform map lands on 0.5 exactly."""
    half = size // 2
    off = (np.arange(half) + 0.5) / size - 0.5
    diff = marg[..., :half] - marg[..., ::-1][..., :half]
    return 0.5 + diff @ off


def spatial_softmax_forward(maps):
    """(N, K, h, w) maps -> (points (N, K, 2), probs (N, K, h*w))."""
    n, k, h, w = maps.shape
    flat = maps.reshape(n, k, h * w)
    e = np.exp(flat - flat.max(axis=2, keepdims=True))
    q = e / e.sum(axis=2, keepdims=True)
    q4 = q.reshape(n, k, h, w)
    points = np.empty((n, k, 2))
    points[..., 0] = _mirrored_mean(q4.sum(axis=2), w)
    points[..., 1] = _mirrored_mean(q4.sum(axis=3), h)
    return points, q


def spatial_softmax_backward(grad_points, probs, points, h, w):
    cx, cy = _grid(h, w)
    gx = grad_points[..., 0:1]
    gy = grad_points[..., 1:2]
    g = probs * ((cx - points[..., 0:1]) * gx + (cy - points[..., 1:2]) * gy)
    return g.reshape(probs.shape[0], probs.shape[1], h, w)


def gap_loss_batch(points, centroids, sigma_t, lambda_c, lambda_s, lambda_d, delta_min):
    """Batched GAP objective over contiguous keypoint subsets.

    Returns ``terms`` (N, M, 3) holding (center, spread, div) per entity and
    ``grad`` (N, K, 2), the gradient of the per-sample entity-mean total.
    """
    n, k, _ = points.shape
    m = centroids.shape[1]
    s = k // m
    p = points.reshape(n, m, s, 2)
    terms = np.zeros((n, m, 3))
    grad = np.zeros((n, m, s, 2))

    mean = p.mean(axis=2)  # (n, m, 2)
    off = mean - centroids
    terms[..., 0] = (off**2).sum(axis=-1)
    grad += lambda_c * (2.0 * off / s)[:, :, None, :]

    rel = p - mean[:, :, None, :]
    dist = np.sqrt((rel**2).sum(axis=-1))  # (n, m, s)
    sigma_p = dist.mean(axis=2)
    gap = sigma_p - sigma_t
    terms[..., 1] = gap**2
    safe = np.where(dist > 0.0, dist, 1.0)
    u = np.where((dist > 0.0)[..., None], rel / safe[..., None], 0.0)
    u_bar = u.mean(axis=2, keepdims=True)
    grad += lambda_s * (2.0 * gap / s)[:, :, None, None] * (u - u_bar)

    if s >= 2:
        diff = p[:, :, :, None, :] - p[:, :, None, :, :]  # p_k - p_j
        pd = np.sqrt((diff**2).sum(axis=-1))
        idx = np.arange(s)
        pd_masked = pd.copy()
        pd_masked[:, :, idx, idx] = np.inf
        nn = pd_masked.argmin(axis=3)  # lowest index on ties
        d = np.take_along_axis(pd_masked, nn[..., None], axis=3)[..., 0]
        hinge = np.maximum(0.0, delta_min - d)
        terms[..., 2] = (hinge**2).mean(axis=2)
        vec = np.take_along_axis(diff, nn[..., None, None], axis=3)[:, :, :, 0, :]
        coincident = d == 0.0
        safe_d = np.where(coincident, 1.0, d)
        e = vec / safe_d[..., None]
        fallback = np.sign(idx[None, None, :] - nn).astype(np.float64)
        e[..., 0] = np.where(coincident, fallback, e[..., 0])
        e[..., 1] = np.where(coincident, 0.0, e[..., 1])
        contrib = (lambda_d * 2.0 / s) * hinge[..., None] * e
        grad -= contrib
        onehot = (nn[..., None] == idx).astype(np.float64)  # (n, m, k, j)
        grad += np.einsum("nmkj,nmkc->nmjc", onehot, contrib)

    grad /= m
    return terms, grad.reshape(n, k, 2)
