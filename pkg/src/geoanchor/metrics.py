"""Keypoint quality metrics and held-out evaluation of a pretrained adapter."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .adapter import KeypointAllocation, adapter_forward, allocate_keypoints
from .gaploss import sigma_target
from .proxyscene import FrozenBackbone, SceneSpec, backbone_features, generate_episode, render_scene
from .runtime import limited_threads

EVAL_SEED_OFFSET = 1_000_000


def _cells(points: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    cx = np.clip(np.floor(points[..., 0] * w).astype(int), 0, w - 1)
    cy = np.clip(np.floor(points[..., 1] * h).astype(int), 0, h - 1)
    return cx, cy


def on_object_hits(points: np.ndarray, feature_masks: np.ndarray, allocation: KeypointAllocation) -> np.ndarray:
    """Boolean (..., K): keypoint's feature cell lies in its own entity's mask."""
    points = np.asarray(points)
    fm = np.asarray(feature_masks, dtype=bool)
    h, w = fm.shape[-2:]
    cx, cy = _cells(points, h, w)
    ent = allocation.assignment()
    if points.ndim == 2:
        return fm[ent, cy, cx]
    n = points.shape[0]
    return fm[np.arange(n)[:, None], ent[None, :], cy, cx]


def on_object_rate(points: np.ndarray, feature_masks: np.ndarray, allocation: KeypointAllocation) -> float:
    return float(on_object_hits(points, feature_masks, allocation).mean())


def nearest_neighbor_distances(points: np.ndarray, allocation: KeypointAllocation) -> np.ndarray:
    """(..., K) distance from each keypoint to its nearest subset-mate."""
    p = np.asarray(points, dtype=np.float64)
    s = allocation.subset_size
    sub = p.reshape(*p.shape[:-2], allocation.m, s, 2)
    d = np.sqrt(((sub[..., :, None, :] - sub[..., None, :, :]) ** 2).sum(axis=-1))
    d[..., np.arange(s), np.arange(s)] = np.inf
    return d.min(axis=-1).reshape(*p.shape[:-1])


def collapse_detector(points: np.ndarray, allocation: KeypointAllocation, threshold: float = 0.15 / 3) -> bool:
    """True iff some subset's mean nearest-neighbour distance is below ``threshold``."""
    if allocation.subset_size < 2:
        return False
    nn = nearest_neighbor_distances(points, allocation).reshape(allocation.m, allocation.subset_size)
    return bool((nn.mean(axis=1) < threshold).any())


def temporal_jitter(points: np.ndarray, centroids: np.ndarray, allocation: KeypointAllocation) -> float:
    """Mean |(p_{t+1} - p_t) - (c_{t+1} - c_t)| over frames and keypoints.

    points (T, K, 2); centroids (T, M, 2) of the entity masks.
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    dp = np.diff(points, axis=0)
    dc = np.diff(centroids, axis=0)[:, allocation.assignment()]
    return float(np.sqrt(((dp - dc) ** 2).sum(axis=-1)).mean())


@dataclass
class EvalReport:
    on_object_rate: float
    centroid_error: list[float]
    spread_error: float
    min_pairwise: dict
    temporal_jitter: float
    collapsed: bool
    collapse_fraction: float
    n_scenes: int
    n_episodes: int
    episode_length: int
    seed: int
    spec: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def scene_seed(seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 1, i])


def evaluate_params(
    params,
    allocation: KeypointAllocation,
    spec: SceneSpec,
    backbone: FrozenBackbone,
    n_scenes: int = 200,
    n_episodes: int = 10,
    seed: int = EVAL_SEED_OFFSET,
    episode_length: int = 20,
    delta_min: float = 0.15,
) -> EvalReport:
    with limited_threads():
        scenes = [render_scene(spec, scene_seed(seed, i)) for i in range(n_scenes)]
        feats = backbone_features(np.stack([s.image for s in scenes]), backbone)
        kp, _, _ = adapter_forward(feats, params, allocation)
        pts = kp.points
        fmasks = np.stack([s.feature_masks for s in scenes])
        ca = [s.centroids_and_areas() for s in scenes]
        cents = np.stack([c for c, _ in ca])
        areas = np.stack([a for _, a in ca])

        rate = on_object_rate(pts, fmasks, allocation)
        sub = pts.reshape(n_scenes, allocation.m, allocation.subset_size, 2)
        mean = sub.mean(axis=2)
        cerr = np.sqrt(((mean - cents) ** 2).sum(axis=-1)).mean(axis=0)
        sig_p = np.sqrt(((sub - mean[:, :, None]) ** 2).sum(axis=-1)).mean(axis=2)
        sig_t = np.vectorize(sigma_target)(areas)
        serr = float((np.abs(sig_p - sig_t) / sig_t).mean())
        if allocation.subset_size >= 2:
            nn = nearest_neighbor_distances(pts, allocation)
            pair = {"min": float(nn.min()), "mean": float(nn.mean())}
        else:
            pair = {"min": 0.0, "mean": 0.0}
        flags = [collapse_detector(p, allocation, delta_min / 3) for p in pts]
        frac = float(np.mean(flags))

        jit = []
        for e in range(n_episodes):
            frames = generate_episode(spec, scene_seed(seed, 10_000_000 + e), episode_length, episode=e)
            f = backbone_features(np.stack([fr.image for fr in frames]), backbone)
            ekp, _, _ = adapter_forward(f, params, allocation)
            ec = np.stack([fr.centroids_and_areas()[0] for fr in frames])
            jit.append(temporal_jitter(ekp.points, ec, allocation))

    return EvalReport(
        on_object_rate=rate,
        centroid_error=[float(v) for v in cerr],
        spread_error=serr,
        min_pairwise=pair,
        temporal_jitter=float(np.mean(jit)) if jit else 0.0,
        collapsed=frac >= 0.5,
        collapse_fraction=frac,
        n_scenes=n_scenes,
        n_episodes=n_episodes,
        episode_length=episode_length,
        seed=int(seed),
        spec=spec.to_dict(),
    )


def evaluate(checkpoint, spec: SceneSpec | None = None, n_scenes: int = 200, n_episodes: int = 10, seed: int | None = None, episode_length: int = 20) -> EvalReport:
    """Held-out evaluation. Default seed is the training data seed + 10**6."""
    cfg = checkpoint.config
    spec = spec or cfg.scene
    seed = cfg.data_seed + EVAL_SEED_OFFSET if seed is None else seed
    return evaluate_params(
        checkpoint.params,
        allocate_keypoints(cfg.k, cfg.m),
        spec,
        FrozenBackbone.create(cfg.backbone_seed),
        n_scenes,
        n_episodes,
        seed,
        episode_length,
        cfg.weights.delta_min,
    )
