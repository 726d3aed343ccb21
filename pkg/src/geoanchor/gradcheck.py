"""Seeded finite-difference checks of every analytic gradient in the package.

Each op draws ``cases`` random instances and compares the analytic gradient
with central differences. Instances that land within a small margin of a
documented nondifferentiable point (ReLU at 0, the diversity hinge at
delta_min, nearest-neighbour ties, a point on its subset mean) are redrawn.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .adapter import KeypointSet, adapter_backward, adapter_forward, allocate_keypoints, init_params
from .gaploss import EntityMask, GapWeights, loss_center, loss_div, loss_gap, loss_gap_batch, loss_spread

TOLERANCE = 1e-5
EPSILON = 1e-5
MARGIN = 1e-3  # clearance from kinks, in the op's own units


@dataclass
class OpResult:
    op: str
    cases: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _fd(f, x):
    return numerics.finite_difference_gradient(f, x, EPSILON)


def _conv_case(rng, k, stride, pad_mode, batched):
    cin, cout, h = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(k + 1, k + 4))
    shape = (2, cin, h, h + 1) if batched else (cin, h, h + 1)
    x = rng.normal(size=shape)
    w = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    out, cache = numerics.conv2d(x, w, b, pad_mode, stride)
    g = rng.normal(size=out.shape)
    gx, gw, gb = numerics.conv2d_backward(g, cache)

    def f(xx=x, ww=w, bb=b):
        return float((numerics.conv2d(xx, ww, bb, pad_mode, stride)[0] * g).sum())

    return max(
        numerics.relative_error(gx, _fd(lambda v: f(xx=v), x)),
        numerics.relative_error(gw, _fd(lambda v: f(ww=v), w)),
        numerics.relative_error(gb, _fd(lambda v: f(bb=v), b)),
    )


def check_conv3x3(rng):
    return _conv_case(rng, 3, 1, "same", bool(rng.integers(2)))


def check_conv1x1(rng):
    return _conv_case(rng, 1, 1, "same", bool(rng.integers(2)))


def check_conv5x5_stride2(rng):
    return _conv_case(rng, 5, 2, "same", bool(rng.integers(2)))


def check_relu(rng):
    x = rng.normal(size=(3, 4, 5))
    x[np.abs(x) < MARGIN] += 2 * MARGIN
    out, cache = numerics.relu(x)
    g = rng.normal(size=out.shape)
    ga = numerics.relu_backward(g, cache)
    return numerics.relative_error(ga, _fd(lambda v: float((numerics.relu(v)[0] * g).sum()), x))


def check_spatial_softmax(rng):
    maps = rng.normal(scale=2.0, size=(int(rng.integers(1, 5)), int(rng.integers(2, 7)), int(rng.integers(2, 7))))
    pts, cache = numerics.spatial_softmax(maps)
    g = rng.normal(size=pts.shape)
    ga = numerics.spatial_softmax_backward(g, cache)
    return numerics.relative_error(ga, _fd(lambda v: float((numerics.spatial_softmax(v)[0] * g).sum()), maps))


def _spread_points(rng, n, delta):
    """Points clear of hinge kinks and nearest-neighbour ties."""
    while True:
        p = rng.uniform(0.2, 0.8, size=(n, 2))
        d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        ds = np.sort(d, axis=1)
        if np.abs(ds[:, 0] - delta).min() > MARGIN and (ds[:, 1] - ds[:, 0]).min() > MARGIN:
            if np.sqrt(((p - p.mean(0)) ** 2).sum(1)).min() > MARGIN:
                return p


def check_loss_center(rng):
    p = rng.uniform(size=(int(rng.integers(1, 9)), 2))
    c = rng.uniform(size=2)
    _, ga = loss_center(p, c)
    return numerics.relative_error(ga, _fd(lambda v: loss_center(v, c)[0], p))


def check_loss_spread(rng):
    p = _spread_points(rng, int(rng.integers(2, 9)), -1.0)
    s = rng.uniform(0.05, 0.3)
    _, ga = loss_spread(p, s)
    return numerics.relative_error(ga, _fd(lambda v: loss_spread(v, s)[0], p))


def check_loss_div(rng):
    delta = 0.15
    # a tighter box so that some hinges are active
    while True:
        p = _spread_points(rng, int(rng.integers(2, 9)), delta) * 0.4 + 0.3
        d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        ds = np.sort(d, axis=1)
        if np.abs(ds[:, 0] - delta).min() > MARGIN and (ds[:, 1] - ds[:, 0]).min() > MARGIN and (ds[:, 0] < delta).any():
            break
    _, ga = loss_div(p, delta)
    return numerics.relative_error(ga, _fd(lambda v: loss_div(v, delta)[0], p))


def _random_masks(rng, m, size=8):
    masks = []
    for _ in range(m):
        grid = rng.random((size, size)) < 0.4
        grid[rng.integers(size), rng.integers(size)] = True
        masks.append(EntityMask.from_grid(grid))
    return masks


def check_loss_gap(rng):
    m = int(rng.integers(1, 3))
    per = int(rng.integers(2, 6))
    alloc = allocate_keypoints(m * per, m)
    p = np.concatenate([_spread_points(rng, per, 0.15) for _ in range(m)])
    masks = _random_masks(rng, m)
    w = GapWeights()
    ga = loss_gap(KeypointSet(p, alloc), masks, w).grad
    return numerics.relative_error(ga, _fd(lambda v: loss_gap(KeypointSet(v, alloc), masks, w).total, p))


def check_loss_gap_batch(rng):
    """The batched training loss (compiled kernel when available)."""
    n, m, per = 3, 2, int(rng.integers(2, 6))
    p = np.stack([np.concatenate([_spread_points(rng, per, 0.15) for _ in range(m)]) for _ in range(n)])
    cents = rng.uniform(0.3, 0.7, size=(n, m, 2))
    areas = rng.uniform(0.02, 0.2, size=(n, m))
    _, _, ga = loss_gap_batch(p, cents, areas)
    return numerics.relative_error(ga, _fd(lambda v: float(loss_gap_batch(v, cents, areas)[1].sum()), p))


def check_adapter_chain(rng):
    """GAP loss of the adapter output, differentiated w.r.t. every adapter tensor."""
    c_in, c_mid, k, m, size = 3, 4, 4, 2, 6
    alloc = allocate_keypoints(k, m)
    masks = _random_masks(rng, m, size)
    feats = rng.normal(size=(c_in, size, size))
    params = init_params(c_in, c_mid, k, int(rng.integers(2**31)))
    d = params.as_dict()
    for v in d.values():
        v += rng.normal(scale=0.3, size=v.shape)
    hidden, _ = numerics.conv2d(feats, params.conv1_weight, params.conv1_bias)
    if np.abs(hidden).min() < MARGIN:
        return check_adapter_chain(rng)
    w = GapWeights()

    def loss_of(pp):
        kp, _, _ = adapter_forward(feats, pp, alloc)
        return loss_gap(kp, masks, w)

    kp, _, cache = adapter_forward(feats, params, alloc)
    br = loss_gap(kp, masks, w)
    pts = kp.points
    sub_ok = True
    for e in range(m):
        r = alloc.subset(e)
        q = pts[r.start : r.stop]
        dd = np.sqrt(((q[:, None] - q[None]) ** 2).sum(-1))
        np.fill_diagonal(dd, np.inf)
        ds = np.sort(dd, axis=1)
        sub_ok &= np.abs(ds[:, 0] - w.delta_min).min() > MARGIN and (ds[:, 1] - ds[:, 0]).min() > MARGIN
    if not sub_ok:
        return check_adapter_chain(rng)
    grads = adapter_backward(br.grad, cache)
    # the conv2 bias gradient is identically zero (softmax is shift invariant),
    # so the error is measured over all parameters jointly
    analytic, numeric = [], []
    for name, tensor in d.items():

        def f(v, name=name):
            p2 = params.copy()
            p2.as_dict()[name][...] = v
            return loss_of(p2).total

        analytic.append(grads[name].ravel())
        numeric.append(_fd(f, tensor).ravel())
    return numerics.relative_error(np.concatenate(analytic), np.concatenate(numeric))


CHECKS = {
    "conv3x3": check_conv3x3,
    "conv1x1": check_conv1x1,
    "conv5x5_stride2": check_conv5x5_stride2,
    "relu": check_relu,
    "spatial_softmax": check_spatial_softmax,
    "loss_center": check_loss_center,
    "loss_spread": check_loss_spread,
    "loss_div": check_loss_div,
    "loss_gap": check_loss_gap,
    "loss_gap_batch": check_loss_gap_batch,
    "adapter_chain": check_adapter_chain,
}


def run(seed: int = 0, cases: int = 20, ops=None) -> list[OpResult]:
    results = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        if ops is not None and name not in ops:
            continue
        worst = 0.0
        for c in range(cases):
            worst = max(worst, fn(np.random.default_rng([seed, i, c])))
        results.append(OpResult(name, cases, worst))
    return results
