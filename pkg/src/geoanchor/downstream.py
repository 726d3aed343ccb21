"""Few-shot imitation on a 2D reach-and-push toy task.

A point gripper pushes a point object onto a goal. Observations are images
rendered with the proxy-scene painter (gripper, object and goal as distinct
entities); segmentation masks are never produced past the renderer, so every
learner below sees pixels only.

Three bottlenecks feed the same MLP head:

* ``gap_checkpoint`` - the pretrained spatial adapter (fine-tuned by default),
* ``random``         - the same adapter architecture from a random init,
* ``avgpool``        - per-channel global average pooling of the backbone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import container
from .adapter import AdapterParams, adapter_backward, adapter_forward, init_params
from .numerics import ShapeError
from .proxyscene import Entity, FrozenBackbone, SceneSpec, backbone_features, compose
from .runtime import limited_threads
from .trainer import AdamState, Checkpoint, adam_step

CONTACT_RADIUS = 0.05
SUCCESS_RADIUS = 0.05
MAX_SPEED = 0.05
HORIZON = 200
PUSH_OFFSET = 0.035  # push point distance behind the object, inside contact
SPAWN_LOW, SPAWN_HIGH = 0.15, 0.85
MIN_SPAWN_GAP = 0.15
INIT_MODES = ("gap_checkpoint", "random", "avgpool")
EVAL_SEED_OFFSET = 1_000_000

FIXED_GOAL = (0.5, 0.5)
GRIPPER_HOME = (0.5, 0.08)
GRIPPER_HOME_JITTER = 0.03

# Drawn radii / half-sizes in normalized units. They are larger than the
# contact radius on purpose: the pretrained adapter has only seen entities
# covering a tenth of the frame or more.
GOAL_RADIUS = 0.07
OBJECT_HALF = 0.12
GRIPPER_RADIUS = 0.07
GOAL_COLOR_INDEX = 2


class EmptyDemoSetError(ValueError):
    pass


# --- environment -----------------------------------------------------------


@dataclass(frozen=True)
class ToyEnvState:
    gripper: tuple[float, float]
    obj: tuple[float, float]
    goal: tuple[float, float]
    t: int = 0
    done: bool = False

    @property
    def success(self) -> bool:
        return _dist(self.obj, self.goal) < SUCCESS_RADIUS


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def env_reset(seed: int, random_goal: bool = False) -> ToyEnvState:
    """Object anywhere in the spawn box, gripper near its home position, all
    pairwise at least ``MIN_SPAWN_GAP`` apart (resampled until they are).

    The goal sits at ``FIXED_GOAL`` unless ``random_goal``, which samples it
    from the spawn box as well.
    """
    rng = np.random.default_rng(seed)
    while True:
        obj = rng.uniform(SPAWN_LOW, SPAWN_HIGH, 2)
        goal = rng.uniform(SPAWN_LOW, SPAWN_HIGH, 2) if random_goal else np.array(FIXED_GOAL)
        grip = np.clip(np.array(GRIPPER_HOME) + rng.normal(0.0, GRIPPER_HOME_JITTER, 2), 0.0, 1.0)
        if min(_dist(obj, goal), _dist(obj, grip), _dist(goal, grip)) >= MIN_SPAWN_GAP:
            return ToyEnvState(tuple(grip.tolist()), tuple(obj.tolist()), tuple(goal.tolist()))


def _physics(grip: np.ndarray, obj: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized transition over (..., 2) arrays.

    Contact is tested at the moved gripper; the push direction is from the
    gripper's position before the move to the object, so a fast gripper
    cannot tunnel through and drag the object backwards.
    """
    a = np.clip(action, -MAX_SPEED, MAX_SPEED)
    g = np.clip(grip + a, 0.0, 1.0)
    contact = ((obj - g) ** 2).sum(axis=-1, keepdims=True) < CONTACT_RADIUS**2
    rel = obj - grip
    d = np.sqrt((rel**2).sum(axis=-1, keepdims=True))
    # a gripper sitting exactly on the object pushes along the action
    an = np.sqrt((a**2).sum(axis=-1, keepdims=True))
    n = np.where(d > 0, rel / np.where(d > 0, d, 1.0), a / np.where(an > 0, an, 1.0))
    push = np.maximum((a * n).sum(axis=-1, keepdims=True), 0.0)
    o = np.where(contact, np.clip(obj + push * n, 0.0, 1.0), obj)
    return g, o


def env_step(state: ToyEnvState, action) -> ToyEnvState:
    """Advance one step. The task is reward-free; success is a state property."""
    if state.done:
        return state
    g, o = _physics(np.array(state.gripper), np.array(state.obj), np.asarray(action, dtype=np.float64))
    nxt = ToyEnvState(tuple(g.tolist()), tuple(o.tolist()), state.goal, state.t + 1)
    return replace(nxt, done=nxt.success or nxt.t >= HORIZON)


CIRCLE_RADIUS = 0.1  # orbit used to get round to the push point
CIRCLE_STEP = 0.5  # rad of orbit advanced per step
EXPERT_GAIN = 0.5
# The expert keeps pushing until well inside the success radius, so a slightly
# biased estimate of the object position does not stall it at the rim.
EXPERT_STOP_RADIUS = 0.5 * SUCCESS_RADIUS


def scripted_expert(state: ToyEnvState) -> np.ndarray:
    """Proportional push controller.

    The target is the push point behind the object as seen from the goal. A
    gripper elsewhere orbits the object the short way round at
    ``CIRCLE_RADIUS``, the orbit shrinking onto the push point as it lines
    up; once there it adds a feed-forward push toward the goal.
    """
    g = np.array(state.gripper)
    o = np.array(state.obj)
    d = np.array(state.goal) - o
    dist = float(np.hypot(*d))
    if dist < EXPERT_STOP_RADIUS:
        return np.zeros(2)
    u = d / dist
    behind = -u
    rel = g - o
    r = float(np.hypot(*rel))
    theta = math.atan2(behind[0] * rel[1] - behind[1] * rel[0], float(behind @ rel)) if r > 0 else math.pi
    th = theta - math.copysign(min(abs(theta), CIRCLE_STEP), theta)
    radius = PUSH_OFFSET + (CIRCLE_RADIUS - PUSH_OFFSET) * min(1.0, abs(th) / CIRCLE_STEP)
    c, s = math.cos(th), math.sin(th)
    target = o + radius * np.array([c * behind[0] - s * behind[1], s * behind[0] + c * behind[1]])
    a = EXPERT_GAIN * (target - g)
    aligned = max(0.0, 1.0 - abs(theta) / 0.35) * min(1.0, max(0.0, 1.0 - (r - PUSH_OFFSET) / 0.03))
    a = a + aligned * min(MAX_SPEED, dist) * u
    return np.clip(a, -MAX_SPEED, MAX_SPEED)


# --- rendering -------------------------------------------------------------


def render_state(state: ToyEnvState, spec: SceneSpec = SceneSpec()) -> np.ndarray:
    """(3, H, W) image: goal disc, object square, gripper disc (painted in that order).

    The gripper is drawn smaller than the object so both stay visible in contact.
    """
    return _render(state.gripper, state.obj, state.goal, spec)


def _render(grip, obj, goal, spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    ents = [
        Entity("disc", spec.entity_color(GOAL_COLOR_INDEX), goal[0] * w, goal[1] * h, GOAL_RADIUS * w, GOAL_RADIUS * h),
        Entity("rectangle", spec.entity_color(1), obj[0] * w, obj[1] * h, OBJECT_HALF * w, OBJECT_HALF * h),
        Entity("disc", spec.entity_color(0), grip[0] * w, grip[1] * h, GRIPPER_RADIUS * w, GRIPPER_RADIUS * h),
    ]
    img, _ = compose(spec, ents)
    return img


# --- demonstrations --------------------------------------------------------


@dataclass
class Demonstration:
    obs: np.ndarray  # (T, 3, H, W)
    act: np.ndarray  # (T, 2)
    seed: int
    success: bool = True

    def __len__(self) -> int:
        return len(self.act)

    def save(self, path) -> None:
        container.save(path, {"obs": self.obs, "act": self.act}, {"seed": int(self.seed), "success": self.success})

    @classmethod
    def load(cls, path) -> "Demonstration":
        tensors, blob = container.load(path)
        missing = {"obs", "act"} - set(tensors)
        if missing:
            raise container.ContainerShapeError(f"demonstration lacks tensors {sorted(missing)}")
        return cls(tensors["obs"], tensors["act"], int(blob["seed"]), bool(blob.get("success", True)))


def demo_seed(seed: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, j]).generate_state(1)[0])


def expert_rollout(env_seed: int, spec: SceneSpec = SceneSpec(), action_noise: float = 0.0) -> tuple[Demonstration, list[ToyEnvState]]:
    """One expert episode. With ``action_noise`` > 0 the executed (and recorded)
    action is the expert's plus Gaussian noise of that many ``MAX_SPEED``, so
    the demos visit and label off-nominal states."""
    rng = np.random.default_rng(env_seed)
    state = env_reset(env_seed)
    states, obs, acts = [state], [], []
    while not state.done and not state.success:
        a = scripted_expert(state)
        if action_noise > 0:
            a = np.clip(a + rng.normal(0.0, action_noise * MAX_SPEED, 2), -MAX_SPEED, MAX_SPEED)
        obs.append(render_state(state, spec))
        acts.append(a)
        state = env_step(state, a)
        states.append(state)
    shape = (0, 3, spec.height, spec.width)
    demo = Demonstration(np.stack(obs) if obs else np.zeros(shape), np.array(acts).reshape(-1, 2), env_seed, state.success)
    return demo, states


def replay(demo: Demonstration) -> list[ToyEnvState]:
    state = env_reset(demo.seed)
    states = [state]
    for a in demo.act:
        state = env_step(state, a)
        states.append(state)
    return states


DEMO_ACTION_NOISE = 0.3


def collect_demos(n: int, seed: int, spec: SceneSpec = SceneSpec(), action_noise: float = DEMO_ACTION_NOISE) -> list[Demonstration]:
    """``n`` successful expert demos from the seed stream; failures are skipped."""
    demos = []
    j = 0
    while len(demos) < n:
        demo, _ = expert_rollout(demo_seed(seed, j), spec, action_noise)
        j += 1
        if demo.success:
            demos.append(demo)
        if j > 10 * n + 100:
            raise RuntimeError(f"expert failed too often ({j - len(demos)} of {j} seeds)")
    return demos


# --- encoders and head -----------------------------------------------------


@dataclass
class Encoder:
    """Image -> flat feature vector. ``params`` is None for the avgpool pooler."""

    mode: str
    backbone: FrozenBackbone
    params: AdapterParams | None = None

    @property
    def dim(self) -> int:
        return self.backbone.out_channels if self.params is None else 2 * self.params.k

    def encode_features(self, feats: np.ndarray):
        """(N, C, h, w) backbone features -> ((N, D) vector, cache or None)."""
        if self.params is None:
            return feats.mean(axis=(2, 3)), None
        kp, _, cache = adapter_forward(feats, self.params)
        return kp.points.reshape(len(feats), -1), cache

    def encode(self, images: np.ndarray, chunk: int = 16) -> np.ndarray:
        """Inference path; small chunks keep the im2col buffers cache-sized."""
        feats = backbone_features(images, self.backbone, chunk)
        parts = [self.encode_features(feats[i : i + chunk])[0] for i in range(0, len(feats), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.dim))


def make_encoder(init: str, backbone: FrozenBackbone, checkpoint: Checkpoint | None = None, seed: int = 0, k: int = 16, c_mid: int = 64) -> Encoder:
    if init not in INIT_MODES:
        raise ValueError(f"unknown init {init!r}; expected one of {INIT_MODES}")
    if init == "avgpool":
        return Encoder(init, backbone)
    if init == "random":
        return Encoder(init, backbone, init_params(backbone.out_channels, c_mid, k, seed))
    if checkpoint is None:
        raise ValueError("init 'gap_checkpoint' needs a checkpoint")
    if checkpoint.params.c_in != backbone.out_channels:
        raise ShapeError(f"checkpoint adapter expects {checkpoint.params.c_in} channels, backbone gives {backbone.out_channels}")
    return Encoder(init, backbone, checkpoint.params.copy())


HEAD_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class PolicyHead:
    """D -> 64 (tanh) -> 2 perceptron on standardized inputs; outputs actions / MAX_SPEED."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    adam: AdamState | None = field(default=None, repr=False)

    @classmethod
    def create(cls, d: int, seed: int, hidden: int = 64) -> "PolicyHead":
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0.0, 1.0 / math.sqrt(d), (hidden, d)),
            np.zeros(hidden),
            rng.normal(0.0, 1.0 / math.sqrt(hidden), (2, hidden)),
            np.zeros(2),
            np.zeros(d),
            np.ones(d),
        )

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"head expects {self.input_dim} inputs, got {x.shape[-1]}")
        z = (x - self.shift) / self.scale
        h = np.tanh(z @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2, (z, h)

    def backward(self, grad_out: np.ndarray, cache) -> tuple[dict[str, np.ndarray], np.ndarray]:
        z, h = cache
        gh = (grad_out @ self.w2) * (1.0 - h * h)
        grads = {"w1": gh.T @ z, "b1": gh.sum(axis=0), "w2": grad_out.T @ h, "b2": grad_out.sum(axis=0)}
        return grads, (gh @ self.w1) / self.scale

    def act(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.forward(x)[0] * MAX_SPEED, -MAX_SPEED, MAX_SPEED)


@dataclass
class BCResult:
    encoder: Encoder
    head: PolicyHead
    history: list[float]  # training MSE (normalized action units) after each epoch
    steps: int


def bc_train(
    init: str,
    demos: list[Demonstration],
    epochs: int,
    lr: float = 1e-3,
    finetune_adapter: bool = True,
    *,
    backbone: FrozenBackbone | None = None,
    checkpoint: Checkpoint | None = None,
    seed: int = 0,
    batch_size: int = 64,
    adapter_lr: float | None = None,
    gap_weights=None,
) -> BCResult:
    """Behavior cloning with a mean-squared action loss.

    The backbone is frozen, so its features are computed once per frame. The
    adapter, when fine-tuned, steps with ``adapter_lr`` (default ``lr``). Only
    images and actions are read from ``demos``. ``gap_weights`` is reserved
    for the GAP-regularized fine-tuning experiment and must stay None here,
    since demonstrations carry no masks.
    """
    if not demos or sum(len(d) for d in demos) == 0:
        raise EmptyDemoSetError("bc_train needs at least one non-empty demonstration")
    if gap_weights is not None:
        raise NotImplementedError("no masks exist downstream; GAP-regularized fine-tuning is not available")
    backbone = backbone or FrozenBackbone.create(checkpoint.config.backbone_seed if checkpoint else 0)
    with limited_threads():
        feats = np.concatenate([backbone_features(d.obs, backbone) for d in demos])
        target = np.concatenate([d.act for d in demos]) / MAX_SPEED
        encoder = make_encoder(init, backbone, checkpoint, seed=seed)
        x0, _ = encoder.encode_features(feats)
        head = PolicyHead.create(encoder.dim, seed + 1)
        head.shift = x0.mean(axis=0)
        head.scale = x0.std(axis=0) + 1e-6
        train_adapter = finetune_adapter and encoder.params is not None
        head.adam = AdamState.zeros_like(head.params())
        adapter_adam = AdamState.zeros_like(encoder.params.as_dict()) if train_adapter else None
        x_fixed = None if train_adapter else x0

        rng = np.random.default_rng(seed + 2)
        n = len(feats)
        history = []
        steps = 0
        for _ in range(epochs):
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = order[s : s + batch_size]
                if train_adapter:
                    x, cache = encoder.encode_features(feats[idx])
                else:
                    x = x_fixed[idx]
                out, hc = head.forward(x)
                g_out = 2.0 * (out - target[idx]) / out.size
                g_head, g_x = head.backward(g_out, hc)
                adam_step(head.params(), g_head, head.adam, lr)
                if train_adapter:
                    g_pts = g_x.reshape(len(idx), -1, 2)
                    adam_step(encoder.params.as_dict(), adapter_backward(g_pts, cache), adapter_adam, lr if adapter_lr is None else adapter_lr)
                steps += 1
            x_all = encoder.encode_features(feats)[0] if train_adapter else x_fixed
            history.append(float(((head.forward(x_all)[0] - target) ** 2).mean()))
    return BCResult(encoder, head, history, steps)


def epochs_to_reach(history: list[float], target: float) -> int | None:
    """1-based epoch at which the training MSE first drops to ``target``."""
    for i, v in enumerate(history):
        if v <= target:
            return i + 1
    return None


# --- evaluation ------------------------------------------------------------


def eval_seed(seed: int, i: int) -> int:
    return demo_seed(seed + EVAL_SEED_OFFSET, i)


def evaluate_policy(encoder: Encoder, head: PolicyHead, n_episodes: int = 100, seed: int = 0, spec: SceneSpec = SceneSpec()) -> float:
    """Success rate over ``n_episodes`` held-out starts, rolled out in lockstep."""
    if n_episodes == 0:
        return 0.0
    if head.input_dim != encoder.dim:
        raise ShapeError(f"head expects {head.input_dim} inputs, encoder gives {encoder.dim}")
    starts = [env_reset(eval_seed(seed, i)) for i in range(n_episodes)]
    g = np.array([s.gripper for s in starts])
    o = np.array([s.obj for s in starts])
    z = np.array([s.goal for s in starts])
    active = np.sqrt(((o - z) ** 2).sum(axis=1)) >= SUCCESS_RADIUS
    with limited_threads():
        for _ in range(HORIZON):
            live = np.flatnonzero(active)
            if len(live) == 0:
                break
            imgs = np.stack([_render(g[i], o[i], z[i], spec) for i in live])
            a = head.act(encoder.encode(imgs))
            g[live], o[live] = _physics(g[live], o[live], a)
            reached = np.sqrt(((o[live] - z[live]) ** 2).sum(axis=1)) < SUCCESS_RADIUS
            active[live[reached]] = False
    success = np.sqrt(((o - z) ** 2).sum(axis=1)) < SUCCESS_RADIUS
    return float(success.mean())


def evaluate_expert(n_episodes: int = 100, seed: int = 0) -> float:
    wins = 0
    for i in range(n_episodes):
        state = env_reset(eval_seed(seed, i))
        while not state.done and not state.success:
            state = env_step(state, scripted_expert(state))
        wins += state.success
    return wins / n_episodes if n_episodes else 0.0


# --- protocol --------------------------------------------------------------

UPDATE_BUDGET = 400  # gradient steps per training run, whatever the demo count
TABLE_COLUMNS = ("method", "demos", "seeds", "success", "median", "mean", "std")


def epochs_for(n_frames: int, batch_size: int = 64, budget: int = UPDATE_BUDGET) -> int:
    """Epoch count giving about ``budget`` updates, so small demo sets are not
    under-trained relative to large ones."""
    per_epoch = max(1, math.ceil(n_frames / batch_size))
    return max(1, math.ceil(budget / per_epoch))


@dataclass
class DownstreamRow:
    method: str
    demos: int
    seeds: list[int]
    success: list[float]

    @property
    def median(self) -> float:
        return float(np.median(self.success))

    def as_csv(self) -> list[str]:
        s = np.array(self.success)
        return [
            self.method,
            str(self.demos),
            " ".join(str(v) for v in self.seeds),
            " ".join(f"{v:.4f}" for v in s),
            f"{self.median:.4f}",
            f"{s.mean():.4f}",
            f"{s.std():.4f}",
        ]


def run_downstream(
    modes,
    demo_counts,
    seeds,
    checkpoint: Checkpoint | None = None,
    n_episodes: int = 100,
    lr: float = 1e-3,
    finetune_adapter: bool = True,
    budget: int = UPDATE_BUDGET,
    on_result=None,
) -> list[DownstreamRow]:
    """Success table: one row per (mode, demo count), one column entry per seed.

    For each seed the largest demo set is collected once; smaller sets are its
    prefixes, which is what the seeded demo stream would give anyway.
    """
    demo_counts = sorted(set(int(d) for d in demo_counts))
    backbone = FrozenBackbone.create(checkpoint.config.backbone_seed if checkpoint else 0)
    results = {(m, d): [] for m in modes for d in demo_counts}
    for seed in seeds:
        pool = collect_demos(max(demo_counts), seed)
        for d in demo_counts:
            demos = pool[:d]
            epochs = epochs_for(sum(len(x) for x in demos), budget=budget)
            for mode in modes:
                res = bc_train(mode, demos, epochs, lr, finetune_adapter, backbone=backbone, checkpoint=checkpoint, seed=seed)
                rate = evaluate_policy(res.encoder, res.head, n_episodes, seed)
                results[(mode, d)].append(rate)
                if on_result is not None:
                    on_result(mode, d, seed, rate)
    return [DownstreamRow(m, d, list(seeds), results[(m, d)]) for d in demo_counts for m in modes]
