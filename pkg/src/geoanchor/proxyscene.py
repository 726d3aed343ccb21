"""Procedural proxy scenes with exact per-entity masks, plus the frozen backbone.

Entities are flat-colored rectangles, discs or L-shapes rendered without
anti-aliasing: a pixel belongs to an entity iff its center lies inside the
shape. Entity ``m`` always takes palette color ``m + palette_shift``, which is
what lets a keypoint subset know which entity it is tracking.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import numerics
from .gaploss import mask_centroid_and_area
from .imageio import write_pgm, write_ppm

PALETTE = (
    (0.85, 0.12, 0.12),
    (0.12, 0.30, 0.85),
    (0.10, 0.62, 0.22),
    (0.95, 0.60, 0.05),
    (0.55, 0.20, 0.70),
    (0.05, 0.70, 0.75),
)
CHECKER_COLORS = ((1.0, 1.0, 1.0), (0.55, 0.55, 0.55))
SHAPES = ("rectangle", "disc", "lshape")
FEATURE_STRIDE = 4
MAX_PLACEMENT_ATTEMPTS = 1000
SPEC_VARIANTS = ("plain", "checker", "palette-shift")


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    n_entities: int = 2
    shapes: tuple[str, ...] = SHAPES
    # entity area as a fraction of the image area
    size_range: tuple[float, float] = (0.12, 0.3)
    background: str = "plain"
    palette: tuple[tuple[float, float, float], ...] = PALETTE
    palette_shift: int = 0
    max_speed: float = 1.5  # px / frame
    aspect_range: tuple[float, float] = (0.7, 1.0 / 0.7)
    min_gap: int = 2  # px between entities
    checker_cell: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.height % FEATURE_STRIDE or self.width % FEATURE_STRIDE:
            raise ValueError(f"image size must be divisible by {FEATURE_STRIDE}")
        if self.background not in ("plain", "checker"):
            raise ValueError(f"unknown background {self.background!r}")
        if len(self.palette) < 6:
            raise ValueError("palette needs at least 6 colors")
        if not set(self.shapes) <= set(SHAPES) or not self.shapes:
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        lo, hi = self.size_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"bad size_range {self.size_range}")
        if self.n_entities < 1:
            raise ValueError("need at least one entity")

    def entity_color(self, m: int) -> tuple[float, float, float]:
        return self.palette[(m + self.palette_shift) % len(self.palette)]

    def variant(self, name: str) -> "SceneSpec":
        if name == "plain":
            return replace(self, background="plain", palette_shift=0)
        if name == "checker":
            return replace(self, background="checker", palette_shift=0)
        if name == "palette-shift":
            return replace(self, palette_shift=self.palette_shift + 3)
        raise ValueError(f"unknown spec variant {name!r}; choose from {SPEC_VARIANTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["size_range"] = list(self.size_range)
        d["aspect_range"] = list(self.aspect_range)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("shapes", "size_range", "aspect_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "palette" in d:
            d["palette"] = tuple(tuple(float(v) for v in c) for c in d["palette"])
        return cls(**d)


@dataclass(frozen=True)
class Entity:
    shape: str
    color: tuple[float, float, float]
    cx: float  # pixel units
    cy: float
    half_w: float
    half_h: float
    orient: int = 0  # L-shape: index of the removed quadrant


def rasterize(ent: Entity, h: int, w: int) -> np.ndarray:
    xs = np.arange(w) + 0.5
    ys = (np.arange(h) + 0.5)[:, None]
    dx = xs - ent.cx
    dy = ys - ent.cy
    if ent.shape == "disc":
        return dx * dx + dy * dy < ent.half_w * ent.half_w
    box = (np.abs(dx) < ent.half_w) & (np.abs(dy) < ent.half_h)
    if ent.shape == "rectangle":
        return box
    if ent.shape == "lshape":
        right = dx >= 0
        below = dy >= 0
        quadrant = [~right & ~below, right & ~below, right & below, ~right & below][ent.orient]
        return box & ~quadrant
    raise ValueError(f"unknown shape {ent.shape!r}")


def background(spec: SceneSpec) -> np.ndarray:
    img = np.ones((3, spec.height, spec.width))
    if spec.background == "checker":
        ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
        odd = ((xs // spec.checker_cell + ys // spec.checker_cell) % 2).astype(bool)
        img[:, odd] = np.array(CHECKER_COLORS[1])[:, None]
    return img


def compose(spec: SceneSpec, entities) -> tuple[np.ndarray, np.ndarray]:
    """Paint entities over the background; return (image, masks (M, H, W))."""
    img = background(spec)
    masks = np.zeros((len(entities), spec.height, spec.width), dtype=bool)
    for m, ent in enumerate(entities):
        mk = rasterize(ent, spec.height, spec.width)
        masks[:, mk] = False
        masks[m] = mk
        img[:, mk] = np.array(ent.color)[:, None]
    return img, masks


def downsample_mask(mask: np.ndarray, factor: int = FEATURE_STRIDE) -> np.ndarray:
    """Cell occupied iff at least half of its factor x factor source pixels are."""
    mask = np.asarray(mask, dtype=bool)
    *lead, h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by {factor}")
    blocks = mask.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(-3, -1)) * 2 >= factor * factor


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    masks: np.ndarray  # (M, H, W) bool
    feature_masks: np.ndarray  # (M, H/4, W/4) bool
    episode: int = 0
    t: int = 0

    def centroids_and_areas(self) -> tuple[np.ndarray, np.ndarray]:
        cs, areas = zip(*(mask_centroid_and_area(g) for g in self.feature_masks))
        return np.array(cs), np.array(areas)


def _sample_entity(spec: SceneSpec, m: int, rng: np.random.Generator) -> Entity:
    shape = spec.shapes[rng.integers(len(spec.shapes))]
    area = rng.uniform(*spec.size_range) * spec.height * spec.width
    orient = 0
    if shape == "disc":
        hw = hh = math.sqrt(area / math.pi)
    elif shape == "rectangle":
        lo, hi = spec.aspect_range
        ratio = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        hw = 0.5 * math.sqrt(area * ratio)
        hh = 0.5 * math.sqrt(area / ratio)
    else:
        hw = hh = 0.5 * math.sqrt(area / 0.75)
        orient = int(rng.integers(4))
    if 2 * hw > spec.width or 2 * hh > spec.height:
        raise PlacementError("entity larger than the frame")
    cx = rng.uniform(hw, spec.width - hw)
    cy = rng.uniform(hh, spec.height - hh)
    return Entity(shape, spec.entity_color(m), cx, cy, hw, hh, orient)


def _separated(masks: np.ndarray, gap: int) -> bool:
    if len(masks) < 2:
        return True
    grown = [ndimage.binary_dilation(mk, iterations=gap) if gap else mk for mk in masks]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if np.any(masks[i] & grown[j]):
                return False
    return True


def _rasterize_all(spec, ents):
    return np.stack([rasterize(e, spec.height, spec.width) for e in ents])


def _valid_frame(spec, ents) -> np.ndarray | None:
    masks = _rasterize_all(spec, ents)
    if not _separated(masks, spec.min_gap):
        return None
    if not downsample_mask(masks).any(axis=(1, 2)).all():
        return None
    return masks


def _make_sample(spec, ents, masks, episode, t) -> SceneSample:
    img, _ = compose(spec, ents)
    return SceneSample(img, masks, downsample_mask(masks), episode, t)


def render_scene(spec: SceneSpec, seed: int | None = None) -> SceneSample:
    """One static scene; entities are rejection-sampled until they do not touch."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        ents = [_sample_entity(spec, m, rng) for m in range(spec.n_entities)]
        masks = _valid_frame(spec, ents)
        if masks is not None:
            return _make_sample(spec, ents, masks, episode=0, t=0)
    raise PlacementError(
        f"could not place {spec.n_entities} entities in {MAX_PLACEMENT_ATTEMPTS} attempts; "
        "try a smaller size_range or fewer entities"
    )


def _advance(ent: Entity, vx: float, vy: float, spec: SceneSpec) -> tuple[Entity, float, float]:
    """Move one frame; reflect position and velocity at the frame border."""
    lo_x, hi_x = ent.half_w, spec.width - ent.half_w
    lo_y, hi_y = ent.half_h, spec.height - ent.half_h
    x, y = ent.cx + vx, ent.cy + vy
    if x < lo_x:
        x, vx = 2 * lo_x - x, -vx
    elif x > hi_x:
        x, vx = 2 * hi_x - x, -vx
    if y < lo_y:
        y, vy = 2 * lo_y - y, -vy
    elif y > hi_y:
        y, vy = 2 * hi_y - y, -vy
    return replace(ent, cx=x, cy=y), vx, vy


def _step_all(ents, vel, spec):
    moved = [_advance(e, vx, vy, spec) for e, (vx, vy) in zip(ents, vel)]
    return [m[0] for m in moved], np.array([[m[1], m[2]] for m in moved])


def generate_episode(
    spec: SceneSpec,
    seed,
    length: int,
    episode: int = 0,
    velocities=None,
) -> list[SceneSample]:
    """A moving-entity episode.

    Entities translate at constant velocity (``velocities`` overrides the
    sampled M x 2 px/frame values), reflect at the frame border, and when a
    step would bring two entities into contact every velocity is reversed.
    """
    if length < 2:
        raise ValueError("episode length must be >= 2")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        ents = [_sample_entity(spec, m, rng) for m in range(spec.n_entities)]
        if velocities is None:
            speed = rng.uniform(0.0, spec.max_speed, size=spec.n_entities)
            angle = rng.uniform(0.0, 2 * math.pi, size=spec.n_entities)
            vel = np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)
        else:
            vel = np.array(velocities, dtype=np.float64).reshape(spec.n_entities, 2)
        masks = _valid_frame(spec, ents)
        if masks is None:
            continue
        frames = [_make_sample(spec, ents, masks, episode, 0)]
        for t in range(1, length):
            nxt, nvel = _step_all(ents, vel, spec)
            masks = _valid_frame(spec, nxt)
            if masks is None:
                nxt, nvel = _step_all(ents, -vel, spec)
                masks = _valid_frame(spec, nxt)
                if masks is None:
                    break
            ents, vel = nxt, nvel
            frames.append(_make_sample(spec, ents, masks, episode, t))
        else:
            return frames
    raise PlacementError(
        f"could not place a {length}-frame episode in {MAX_PLACEMENT_ATTEMPTS} attempts; "
        "try a smaller size_range or lower max_speed"
    )


def dump_episode(frames, out_dir) -> list[Path]:
    """Write ``ep{E}_t{T}_img.ppm`` and ``ep{E}_t{T}_mask{m}.pgm`` files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in frames:
        p = out_dir / f"ep{s.episode}_t{s.t}_img.ppm"
        write_ppm(p, s.image)
        written.append(p)
        for m, mk in enumerate(s.masks):
            p = out_dir / f"ep{s.episode}_t{s.t}_mask{m}.pgm"
            write_pgm(p, mk)
            written.append(p)
    return written


# --- frozen backbone -------------------------------------------------------


@dataclass(frozen=True)
class FrozenBackbone:
    """Two 5x5 stride-2 conv + ReLU stages (3 -> 16 -> 32), zero biases."""

    w1: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)
    seed: int = 0

    @classmethod
    def create(cls, seed: int = 0) -> "FrozenBackbone":
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, 1.0 / math.sqrt(3 * 25), size=(16, 3, 5, 5))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(16 * 25), size=(32, 16, 5, 5))
        w1.setflags(write=False)
        w2.setflags(write=False)
        return cls(w1, w2, seed)

    @property
    def out_channels(self) -> int:
        return self.w2.shape[0]

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(self.w1.tobytes() + self.w2.tobytes()).hexdigest()


def backbone_features(image: np.ndarray, backbone: FrozenBackbone, chunk: int = 16) -> np.ndarray:
    """(3, H, W) or (N, 3, H, W) images -> (32, H/4, W/4) features (batched likewise)."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    batch = image[None] if single else image
    if batch.shape[1] != 3:
        raise numerics.ShapeError(f"image must have 3 channels, got {batch.shape[1]}")
    if batch.shape[2] % FEATURE_STRIDE or batch.shape[3] % FEATURE_STRIDE:
        raise numerics.ShapeError(f"image size {batch.shape[2:]} not divisible by {FEATURE_STRIDE}")
    zeros16 = np.zeros(16)
    zeros32 = np.zeros(32)
    outs = []
    for i in range(0, len(batch), chunk):
        x, _ = numerics.conv2d(batch[i : i + chunk], backbone.w1, zeros16, padding="same", stride=2)
        x = np.maximum(x, 0.0)
        x, _ = numerics.conv2d(x, backbone.w2, zeros32, padding="same", stride=2)
        outs.append(np.maximum(x, 0.0))
    out = np.concatenate(outs) if outs else np.zeros((0, 32, batch.shape[2] // 4, batch.shape[3] // 4))
    return out[0] if single else out


# --- proxy dataset ---------------------------------------------------------


@dataclass
class ProxyDataset:
    features: np.ndarray  # (N, C, h, w)
    feature_masks: np.ndarray  # (N, M, h, w)
    centroids: np.ndarray  # (N, M, 2)
    areas: np.ndarray  # (N, M)
    episode: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.features)


def episode_seed(seed: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, episode])


def generate_episodes(spec: SceneSpec, n_episodes: int, length: int, seed: int):
    for e in range(n_episodes):
        yield generate_episode(spec, episode_seed(seed, e), length, episode=e)


def build_proxy_dataset(
    spec: SceneSpec,
    n_episodes: int,
    length: int,
    seed: int,
    backbone: FrozenBackbone,
) -> ProxyDataset:
    """Render every frame, run the backbone once, cache mask moments.

    Frames are stored in (episode, t) order; the result depends only on the
    arguments.
    """
    feats, fmasks, cents, areas, eps, ts = [], [], [], [], [], []
    for frames in generate_episodes(spec, n_episodes, length, seed):
        imgs = np.stack([f.image for f in frames])
        feats.append(backbone_features(imgs, backbone))
        for f in frames:
            c, a = f.centroids_and_areas()
            fmasks.append(f.feature_masks)
            cents.append(c)
            areas.append(a)
            eps.append(f.episode)
            ts.append(f.t)
    return ProxyDataset(
        np.concatenate(feats),
        np.stack(fmasks),
        np.stack(cents),
        np.stack(areas),
        np.array(eps),
        np.array(ts),
    )
