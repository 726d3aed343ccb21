"""Thread capping. ``GAP_THREADS`` (default 1) bounds BLAS worker threads;
results are only bit-reproducible for a fixed thread count."""
from __future__ import annotations

import os
from contextlib import contextmanager

from threadpoolctl import threadpool_limits


def thread_count() -> int:
    raw = os.environ.get("GAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"GAP_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"GAP_THREADS must be a positive integer, got {raw!r}")
    return n


@contextmanager
def limited_threads():
    with threadpool_limits(limits=thread_count()):
        yield
