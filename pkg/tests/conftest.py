import os

os.environ.setdefault("GAP_THREADS", "1")

import dataclasses
import time
from types import SimpleNamespace

import numpy as np
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def criterion_log():
    """Acceptance tests append one summary line each; printed at the end of the run."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


# --- expensive shared runs (built once per session, only when requested) ----


@pytest.fixture(scope="session")
def default_run():
    from geoanchor.trainer import TrainConfig, make_dataset, pretrain

    cfg = TrainConfig()

    def go():
        data = make_dataset(cfg)
        return pretrain(cfg, data), data

    (ckpt, data), seconds = _timed(go)
    return SimpleNamespace(ckpt=ckpt, data=data, seconds=seconds)


@pytest.fixture(scope="session")
def default_checkpoint(default_run):
    return default_run.ckpt


@pytest.fixture(scope="session")
def checker_checkpoint():
    from geoanchor.trainer import TrainConfig, pretrain

    base = TrainConfig()
    return pretrain(dataclasses.replace(base, scene=base.scene.variant("checker")))


@pytest.fixture(scope="session")
def ablation_runs(default_run):
    """Default config with one loss weight zeroed; the full row is the default run."""
    from geoanchor.cli import ablation_variants
    from geoanchor.metrics import evaluate
    from geoanchor.trainer import pretrain

    cfg = default_run.ckpt.config
    out = {"full": evaluate(default_run.ckpt)}
    for name, weights in ablation_variants("all", cfg.weights)[1:4]:
        out[name] = evaluate(pretrain(dataclasses.replace(cfg, weights=weights), default_run.data))
    return out


@pytest.fixture(scope="session")
def downstream_suite(default_checkpoint):
    from geoanchor.downstream import INIT_MODES, run_downstream

    rows, seconds = _timed(run_downstream, INIT_MODES, [15, 50], [0, 1, 2], default_checkpoint, 100)
    return SimpleNamespace(rows={(r.method, r.demos): r for r in rows}, seconds=seconds)
