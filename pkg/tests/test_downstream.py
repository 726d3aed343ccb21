import inspect
import math
from dataclasses import fields

import numpy as np
import pytest

from geoanchor import downstream as ds
from geoanchor.adapter import init_params
from geoanchor.downstream import (
    CONTACT_RADIUS,
    MAX_SPEED,
    PUSH_OFFSET,
    Demonstration,
    EmptyDemoSetError,
    PolicyHead,
    ToyEnvState,
    bc_train,
    collect_demos,
    demo_seed,
    env_reset,
    env_step,
    epochs_for,
    epochs_to_reach,
    evaluate_expert,
    evaluate_policy,
    expert_rollout,
    make_encoder,
    render_state,
    replay,
    scripted_expert,
)
from geoanchor.numerics import ShapeError
from geoanchor.proxyscene import FrozenBackbone

BB = FrozenBackbone.create(0)


def dist(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


# --- environment -----------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_reset_in_workspace(seed):
    s = env_reset(seed)
    for p in (s.gripper, s.obj, s.goal):
        assert 0 <= p[0] <= 1 and 0 <= p[1] <= 1
    assert s.t == 0 and not s.done
    assert env_reset(seed) == s


def test_zero_action_forever():
    s0 = env_reset(3)
    s = s0
    for t in range(1, 250):
        s = env_step(s, (0.0, 0.0))
        assert (s.gripper, s.obj, s.goal) == (s0.gripper, s0.obj, s0.goal)
        assert s.t == min(t, 200)
    assert s.done and not s.success


def test_far_gripper_never_moves_object(rng):
    s = ToyEnvState((0.1, 0.1), (0.8, 0.8), (0.5, 0.5))
    for _ in range(60):
        s = env_step(s, rng.uniform(-0.2, 0.2, 2))
        if dist(s.gripper, s.obj) >= CONTACT_RADIUS + MAX_SPEED * math.sqrt(2):
            assert s.obj == (0.8, 0.8)


def test_action_clamped():
    s = env_step(ToyEnvState((0.5, 0.5), (0.9, 0.9), (0.1, 0.9)), (1.0, -1.0))
    assert s.gripper == pytest.approx((0.55, 0.45))


def test_positions_clamped():
    s = ToyEnvState((0.01, 0.99), (0.5, 0.5), (0.2, 0.2))
    s = env_step(s, (-0.05, 0.05))
    assert s.gripper == (0.0, 1.0)


def test_push_moves_object_along_contact_direction():
    s = ToyEnvState((0.5, 0.5 - PUSH_OFFSET), (0.5, 0.5), (0.5, 0.9))
    s2 = env_step(s, (0.0, 0.03))
    assert s2.obj[0] == pytest.approx(0.5) and s2.obj[1] == pytest.approx(0.53)
    # pulling away does not drag the object
    s3 = env_step(s, (0.0, -0.03))
    assert s3.obj == s.obj


def test_success_ends_episode():
    s = ToyEnvState((0.5, 0.46), (0.5, 0.5), (0.5, 0.56))
    s = env_step(s, (0.0, 0.03))
    assert s.success and s.done
    assert env_step(s, (0.05, 0.05)) == s


# --- expert ----------------------------------------------------------------


def test_expert_at_goal():
    s = ToyEnvState((0.2, 0.2), (0.5, 0.5), (0.5, 0.5))
    assert not scripted_expert(s).any()


@pytest.mark.parametrize("angle", np.linspace(0, 2 * np.pi, 7)[:-1])
def test_expert_pushes_toward_goal(angle):
    o = np.array([0.5, 0.5])
    u = np.array([math.cos(angle), math.sin(angle)])
    goal = o + 0.3 * u
    g = o - PUSH_OFFSET * u
    a = scripted_expert(ToyEnvState(tuple(g), tuple(o), tuple(goal)))
    assert np.dot(a, u) / np.linalg.norm(a) > 1 - 1e-9
    assert np.all(np.abs(a) <= MAX_SPEED)


def test_expert_success_rate():
    assert evaluate_expert(100) >= 0.99


def test_expert_monotone_after_contact():
    for s in range(50):
        _, states = expert_rollout(demo_seed(7, s))
        moved = [i for i in range(1, len(states)) if states[i].obj != states[i - 1].obj]
        if not moved:
            continue
        d = [dist(x.obj, x.goal) for x in states[moved[0] - 1 :]]
        assert np.all(np.diff(d) <= 0), s


def test_expert_actions_bounded(rng):
    for _ in range(200):
        s = ToyEnvState(tuple(rng.uniform(size=2)), tuple(rng.uniform(size=2)), tuple(rng.uniform(size=2)))
        assert np.all(np.abs(scripted_expert(s)) <= MAX_SPEED)


# --- demos -----------------------------------------------------------------


def test_collect_zero():
    assert collect_demos(0, 0) == []


@pytest.fixture(scope="module")
def demos3():
    return collect_demos(3, 11)


def test_collect_deterministic(demos3):
    again = collect_demos(3, 11)
    for a, b in zip(demos3, again):
        assert a.seed == b.seed and np.array_equal(a.obs, b.obs) and np.array_equal(a.act, b.act)


def test_collect_fifteen_deterministic():
    a, b = collect_demos(15, 4), collect_demos(15, 4)
    assert len(a) == 15 and [d.seed for d in a] == [d.seed for d in b]
    assert all(np.array_equal(x.act, y.act) for x, y in zip(a, b))


def test_demos_replay_to_success(demos3):
    for d in demos3:
        states = replay(d)
        assert states[-1].success and len(d) <= 200
        for st, ob in zip(states[:-1], d.obs):
            assert np.array_equal(render_state(st), ob)


def test_demo_actions_in_box(demos3):
    for d in demos3:
        assert np.all(np.abs(d.act) <= MAX_SPEED)


def test_demo_save_load(tmp_path, demos3):
    p = tmp_path / "d.gapc"
    demos3[0].save(p)
    back = Demonstration.load(p)
    assert back.seed == demos3[0].seed
    assert np.array_equal(back.obs, demos3[0].obs) and np.array_equal(back.act, demos3[0].act)


def test_mask_firewall():
    # demonstrations carry images and actions only; the module never reads masks
    assert {f.name for f in fields(Demonstration)} == {"obs", "act", "seed", "success"}
    src = inspect.getsource(ds)
    assert ".masks" not in src and "feature_masks" not in src


def test_render_entities_distinct():
    img = render_state(ToyEnvState((0.2, 0.2), (0.6, 0.6), (0.8, 0.25)))
    colors = {tuple(v) for v in img.reshape(3, -1).T}
    assert len(colors) == 4


# --- behaviour cloning -----------------------------------------------------


def test_empty_demo_set():
    with pytest.raises(EmptyDemoSetError):
        bc_train("random", [], 1)
    empty = Demonstration(np.zeros((0, 3, 64, 64)), np.zeros((0, 2)), 0)
    with pytest.raises(EmptyDemoSetError):
        bc_train("random", [empty], 1)


def test_gap_regularized_finetune_unavailable(demos3):
    with pytest.raises(NotImplementedError):
        bc_train("random", demos3[:1], 1, gap_weights=object())


def test_unknown_init():
    with pytest.raises(ValueError):
        make_encoder("attention", BB)
    with pytest.raises(ValueError):
        make_encoder("gap_checkpoint", BB)


def test_checkpoint_shape_mismatch():
    from types import SimpleNamespace

    fake = SimpleNamespace(params=init_params(16, 8, 16, 0))
    with pytest.raises(ShapeError):
        make_encoder("gap_checkpoint", BB, fake)


def test_encoder_dims():
    assert make_encoder("avgpool", BB).dim == 32
    assert make_encoder("random", BB).dim == 32
    assert make_encoder("random", BB, k=8).dim == 16


def test_head_shape_checked():
    head = PolicyHead.create(10, 0)
    with pytest.raises(ShapeError):
        head.forward(np.zeros((1, 32)))
    with pytest.raises(ShapeError):
        evaluate_policy(make_encoder("avgpool", BB), head, 1)


def test_head_gradient(rng):
    head = PolicyHead.create(6, 0, hidden=5)
    head.shift, head.scale = rng.normal(size=6), rng.uniform(0.5, 2, 6)
    x = rng.normal(size=(4, 6))
    g = rng.normal(size=(4, 2))
    out, cache = head.forward(x)
    grads, gx = head.backward(g, cache)
    from geoanchor.numerics import finite_difference_gradient, relative_error

    assert relative_error(gx, finite_difference_gradient(lambda v: float((head.forward(v)[0] * g).sum()), x)) < 1e-6
    for name, p in head.params().items():

        def f(v, name=name):
            saved = p.copy()
            p[...] = v
            val = float((head.forward(x)[0] * g).sum())
            p[...] = saved
            return val

        assert relative_error(grads[name], finite_difference_gradient(f, p.copy())) < 1e-6


@pytest.mark.parametrize("init", ["random", "avgpool"])
def test_constant_action_memorized(demos3, init):
    d = demos3[0]
    const = Demonstration(d.obs[:20], np.tile([0.03, -0.02], (20, 1)), d.seed)
    res = bc_train(init, [const], 500, lr=1e-2)
    assert ds.epochs_to_reach(res.history, 1e-4) is not None
    assert len(res.history) <= 500


def test_bc_deterministic(demos3):
    a = bc_train("random", demos3[:2], 2, seed=5)
    b = bc_train("random", demos3[:2], 2, seed=5)
    for k, v in a.head.params().items():
        assert np.array_equal(v, b.head.params()[k])
    for k, v in a.encoder.params.as_dict().items():
        assert np.array_equal(v, b.encoder.params.as_dict()[k])
    assert a.history == b.history


def test_frozen_adapter_unchanged(demos3):
    enc0 = make_encoder("random", BB, seed=5)
    res = bc_train("random", demos3[:1], 2, finetune_adapter=False, seed=5)
    for k, v in enc0.params.as_dict().items():
        assert np.array_equal(v, res.encoder.params.as_dict()[k])


def test_epochs_helpers():
    assert epochs_to_reach([0.5, 0.2, 0.1], 0.2) == 2
    assert epochs_to_reach([0.5], 0.1) is None
    assert epochs_for(64 * 4) == 100 and epochs_for(1) == 400


def test_untrained_policy_fails():
    enc = make_encoder("random", BB, seed=0)
    head = PolicyHead.create(enc.dim, 1)
    assert evaluate_policy(enc, head, 100, seed=0) <= 0.1


def test_evaluate_policy_deterministic(demos3):
    res = bc_train("avgpool", demos3[:1], 1)
    a = evaluate_policy(res.encoder, res.head, 5, seed=2)
    assert a == evaluate_policy(res.encoder, res.head, 5, seed=2)


def test_evaluate_zero_episodes():
    enc = make_encoder("avgpool", BB)
    assert evaluate_policy(enc, PolicyHead.create(32, 0), 0) == 0.0


@pytest.mark.slow
def test_gap_init_learns_faster(default_checkpoint):
    """Epochs to a common training MSE on 15 demos, median over three seeds."""
    gap, rnd = [], []
    for seed in range(3):
        demos = collect_demos(15, seed)
        epochs = epochs_for(sum(len(d) for d in demos))
        hg = bc_train("gap_checkpoint", demos, epochs, checkpoint=default_checkpoint, seed=seed).history
        hr = bc_train("random", demos, epochs, seed=seed).history
        target = 1.1 * max(min(hg), min(hr))
        gap.append(epochs_to_reach(hg, target))
        rnd.append(epochs_to_reach(hr, target))
    assert np.median(gap) < np.median(rnd), (gap, rnd)
