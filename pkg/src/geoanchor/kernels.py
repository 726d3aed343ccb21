"""Kernel backend selection.

The compiled extension is used when importable; ``GAP_KERNELS=python`` forces
the numpy fallback. Both backends expose the same functions.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels


def _load() -> ModuleType:
    choice = os.environ.get("GAP_KERNELS", "auto").lower()
    if choice == "python":
        return _pykernels
    try:
        from . import _ckernels
    except ImportError:
        if choice == "cython":
            raise
        return _pykernels
    return _ckernels


backend = _load()
BACKEND = backend.NAME

im2col = backend.im2col
col2im = backend.col2im
spatial_softmax_forward = backend.spatial_softmax_forward
spatial_softmax_backward = backend.spatial_softmax_backward
gap_loss_batch = backend.gap_loss_batch


def available_backends() -> dict[str, ModuleType]:
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
