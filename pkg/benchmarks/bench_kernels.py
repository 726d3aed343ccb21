"""Time the compiled kernels against the numpy fallback on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the best-of-N wall time of each backend, the
speedup, and the max absolute difference between the two outputs.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from geoanchor.kernels import available_backends
from geoanchor.runtime import limited_threads


def cases(rng):
    """(name, args builder) pairs; shapes match one pretraining batch."""
    n, c, h, w = 32, 32, 16, 16
    x = rng.normal(size=(n, c, h, w))
    img = rng.normal(size=(16, 3, 64, 64))
    cols3 = rng.normal(size=(c * 9, n, h * w))
    maps = rng.normal(size=(n, 16, h, w))
    gp = rng.normal(size=(n, 16, 2))
    pts = rng.uniform(size=(n, 16, 2))
    cents = rng.uniform(size=(n, 2, 2))
    sig = rng.uniform(0.1, 0.3, size=(n, 2))
    return [
        ("im2col 3x3 s1", "im2col", (x, 3, 3, 1, 1)),
        ("im2col 5x5 s2", "im2col", (img, 5, 5, 2, 2)),
        ("col2im 3x3 s1", "col2im", (cols3, n, c, h, w, 3, 3, 1, 1)),
        ("softmax fwd", "spatial_softmax_forward", (maps,)),
        ("softmax bwd", "spatial_softmax_backward", None),
        ("gap loss batch", "gap_loss_batch", (pts, cents, sig, 0.3, 0.5, 2.0, 0.15)),
    ], (maps, gp, h, w)


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    table, (maps, gp, h, w) = cases(rng)
    print(f"{'kernel':<16} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max |diff|':>11}")
    with limited_threads():
        for label, fn, fargs in table:
            times, outs = {}, {}
            for name, mod in backends.items():
                if fargs is None:
                    _, probs = mod.spatial_softmax_forward(maps)
                    pts = mod.spatial_softmax_forward(maps)[0]
                    call_args = (gp, probs, pts, h, w)
                else:
                    call_args = fargs
                f = getattr(mod, fn)
                outs[name] = _flat(f(*call_args))
                times[name] = min(timeit.repeat(lambda: f(*call_args), number=1, repeat=args.repeat)) * 1e3
            py = times["python"]
            cy = times.get("cython", float("nan"))
            diff = float(np.abs(outs["python"] - outs["cython"]).max()) if "cython" in outs else float("nan")
            print(f"{label:<16} {py:>10.3f} {cy:>10.3f} {py / cy:>8.2f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
