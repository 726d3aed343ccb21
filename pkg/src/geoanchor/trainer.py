"""Pretraining loop: Adam over adapter parameters under the GAP objective."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from .adapter import PARAM_NAMES, AdapterParams, adapter_backward, adapter_forward, allocate_keypoints, init_params
from .container import ContainerShapeError
from .gaploss import GapWeights, loss_gap_batch
from .proxyscene import FrozenBackbone, ProxyDataset, SceneSpec, build_proxy_dataset
from .runtime import limited_threads

log = logging.getLogger(__name__)

BACKBONE_CHANNELS = 32
LOG_COLUMNS = ("step", "center", "spread", "div", "total")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10_000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: GapWeights = field(default_factory=GapWeights)
    k: int = 16
    m: int = 2
    c_mid: int = 64
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_episodes: int = 100
    episode_length: int = 40
    data_seed: int = 0
    init_seed: int = 0
    backbone_seed: int = 0
    log_every: int = 100
    zero_final_init: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.k % self.m:
            raise ValueError(f"k={self.k} must be divisible by m={self.m}")
        if self.m != self.scene.n_entities:
            raise ValueError(f"m={self.m} but the scene has {self.scene.n_entities} entities")
        if self.n_episodes < 1 or self.episode_length < 2:
            raise ValueError("need n_episodes >= 1 and episode_length >= 2")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = asdict(self.weights)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d:
            d["weights"] = GapWeights(**d["weights"])
        if "scene" in d:
            d["scene"] = SceneSpec.from_dict(d["scene"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam, in place, visiting tensors in sorted-name order."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name in sorted(params):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    params: AdapterParams
    adam: AdamState
    config: TrainConfig
    # rows (center, spread, div, total) per entity, from the final step's batch
    final_loss: np.ndarray
    final_total: float
    history: list = field(default_factory=list, compare=False, repr=False)
    trace: np.ndarray | None = field(default=None, compare=False, repr=False)

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params.as_dict())
        for name in PARAM_NAMES:
            out[f"adam.m.{name}"] = self.adam.m[name]
        for name in PARAM_NAMES:
            out[f"adam.v.{name}"] = self.adam.v[name]
        out["adam.t"] = np.array([float(self.adam.t)])
        out["loss.entities"] = np.asarray(self.final_loss, dtype=np.float64)
        out["loss.total"] = np.array([self.final_total])
        return out


def _checkpoint_validator(name, dims, seen):
    dims = tuple(dims)
    if name == "conv1.weight":
        if len(dims) != 4 or dims[1] != BACKBONE_CHANNELS or dims[2:] != (3, 3):
            raise ContainerShapeError(f"conv1.weight advertises {dims}, expected (c_mid, {BACKBONE_CHANNELS}, 3, 3)")
        return
    if "conv1.weight" not in seen:
        raise ContainerShapeError(f"{name!r} precedes conv1.weight in the shape table")
    c_mid = seen["conv1.weight"][0]
    k = seen["conv2.weight"][0] if "conv2.weight" in seen else None
    if name == "conv2.weight":
        if len(dims) != 4 or dims[1:] != (c_mid, 1, 1):
            raise ContainerShapeError(f"conv2.weight advertises {dims}, expected (k, {c_mid}, 1, 1)")
        return
    if name == "conv1.bias":
        want = (c_mid,)
    elif name == "conv2.bias":
        want = (k,)
    elif name.startswith(("adam.m.", "adam.v.")):
        base = name[len("adam.m.") :]
        if base not in seen:
            raise ContainerShapeError(f"{name!r} refers to unknown parameter {base!r}")
        want = seen[base]
    elif name in ("adam.t", "loss.total"):
        want = (1,)
    elif name == "loss.entities":
        if len(dims) != 2 or dims[1] != 4:
            raise ContainerShapeError(f"loss.entities advertises {dims}, expected (m, 4)")
        return
    else:
        raise ContainerShapeError(f"unexpected tensor {name!r}")
    if dims != want:
        raise ContainerShapeError(f"tensor {name!r} advertises shape {dims}, expected {want}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return container.encode(ckpt.tensors(), ckpt.config.to_dict())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    tensors, blob = container.decode(raw, _checkpoint_validator)
    config = TrainConfig.from_dict(blob)
    expected = {
        **AdapterParams.expected_shapes(BACKBONE_CHANNELS, config.c_mid, config.k),
        "loss.entities": (config.m, 4),
    }
    for name, shape in expected.items():
        if name not in tensors:
            raise ContainerShapeError(f"missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise ContainerShapeError(f"tensor {name!r} has shape {tensors[name].shape}, config implies {shape}")
    for prefix in ("adam.m.", "adam.v."):
        for name in PARAM_NAMES:
            if prefix + name not in tensors:
                raise ContainerShapeError(f"missing tensor {prefix + name!r}")
    params = AdapterParams.from_dict(tensors, seed=config.init_seed)
    adam = AdamState(
        {n: tensors[f"adam.m.{n}"] for n in PARAM_NAMES},
        {n: tensors[f"adam.v.{n}"] for n in PARAM_NAMES},
        int(tensors["adam.t"][0]),
    )
    return Checkpoint(params, adam, config, tensors["loss.entities"], float(tensors["loss.total"][0]))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --- training --------------------------------------------------------------


def batch_indices(data_seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """I.i.d. frame indices for ``step``; a pure function of its arguments."""
    return np.random.default_rng([data_seed, step]).integers(0, n, size=batch_size)


def make_dataset(config: TrainConfig, backbone: FrozenBackbone | None = None) -> ProxyDataset:
    backbone = backbone or FrozenBackbone.create(config.backbone_seed)
    return build_proxy_dataset(config.scene, config.n_episodes, config.episode_length, config.data_seed, backbone)


def train_step(params: AdapterParams, state: AdamState, data: ProxyDataset, idx: np.ndarray, config: TrainConfig):
    """One Adam update on the frames ``idx``; returns (terms, totals)."""
    alloc = allocate_keypoints(config.k, config.m)
    kp, _, cache = adapter_forward(data.features[idx], params, alloc)
    terms, totals, grad_pts = loss_gap_batch(kp.points, data.centroids[idx], data.areas[idx], config.weights)
    grads = adapter_backward(grad_pts / len(idx), cache)
    pdict = params.as_dict()
    adam_step(pdict, grads, state, config.lr, config.beta1, config.beta2, config.eps)
    return terms, totals


def pretrain(
    config: TrainConfig,
    data: ProxyDataset | None = None,
    on_log: Callable[[tuple], None] | None = None,
) -> Checkpoint:
    """Run GAP pretraining and return the final checkpoint.

    Telemetry rows (step, center, spread, div, total) hold batch means and are
    emitted every ``log_every`` steps and at the last step.
    """
    with limited_threads():
        if data is None:
            data = make_dataset(config)
        params = init_params(BACKBONE_CHANNELS, config.c_mid, config.k, config.init_seed, config.zero_final_init)
        state = AdamState.zeros_like(params.as_dict())
        lam = np.array([config.weights.lambda_c, config.weights.lambda_s, config.weights.lambda_d])
        history = []
        trace = np.empty(config.steps)
        terms = None
        for step in range(config.steps):
            idx = batch_indices(config.data_seed, step, len(data), config.batch_size)
            terms, totals = train_step(params, state, data, idx, config)
            if not np.all(np.isfinite(totals)):
                bad = int(idx[np.flatnonzero(~np.isfinite(totals))[0]])
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}, frame {bad} "
                    f"(episode {data.episode[bad]}, t={data.t[bad]}, data_seed={config.data_seed})"
                )
            trace[step] = totals.mean()
            if step % config.log_every == 0 or step == config.steps - 1:
                c, s, d = terms.mean(axis=(0, 1))
                row = (step, float(c), float(s), float(d), float(trace[step]))
                history.append(row)
                log.info("step %d center %.5f spread %.5f div %.5f total %.5f", *row)
                if on_log is not None:
                    on_log(row)
        per_entity = terms.mean(axis=0)  # (M, 3)
        final = np.concatenate([per_entity, (per_entity @ lam)[:, None]], axis=1)
        return Checkpoint(params, state, config, final, float(final[:, 3].mean()), history, trace)


def write_loss_log(history, path) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for step, c, s, d, t in history:
        lines.append(f"{step},{c!r},{s!r},{d!r},{t!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    c = np.cumsum(np.concatenate([[0.0], np.asarray(x, dtype=np.float64)]))
    return (c[window:] - c[:-window]) / window


def trend_violations(trace: np.ndarray, window: int = 500, tol: float = 0.05) -> list[int]:
    """Indices where the moving average rises more than ``tol`` above its running minimum."""
    ma = moving_average(trace, window)
    best = np.minimum.accumulate(ma)
    return [int(i) for i in np.flatnonzero(ma > best * (1.0 + tol))]
