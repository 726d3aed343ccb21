import json
import struct

import numpy as np
import pytest

from geoanchor import container
from geoanchor.adapter import init_params
from geoanchor.container import BadMagicError, ContainerError, ContainerShapeError, TruncatedFileError, VersionError
from geoanchor.gaploss import GapWeights
from geoanchor.proxyscene import FrozenBackbone, SceneSpec
from geoanchor.trainer import (
    LOG_COLUMNS,
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    batch_indices,
    checkpoint_bytes,
    decode_checkpoint,
    load_checkpoint,
    make_dataset,
    moving_average,
    pretrain,
    save_checkpoint,
    trend_violations,
    write_loss_log,
)

SMALL = TrainConfig(steps=30, batch_size=8, c_mid=8, n_episodes=3, episode_length=4, log_every=10)


@pytest.fixture(scope="module")
def small_data():
    return make_dataset(SMALL)


@pytest.fixture(scope="module")
def small_ckpt(small_data):
    return pretrain(SMALL, small_data)


# --- adam ------------------------------------------------------------------


def test_adam_zero_gradient():
    p = {"x": np.array([1.0, -2.0])}
    s = AdamState.zeros_like(p)
    adam_step(p, {"x": np.zeros(2)}, s, 0.1)
    assert np.array_equal(p["x"], [1.0, -2.0])
    assert not s.m["x"].any() and not s.v["x"].any() and s.t == 1


def test_adam_first_step():
    p = {"x": np.array([1.0])}
    s = AdamState.zeros_like(p)
    adam_step(p, {"x": np.array([1.0])}, s, 0.1)
    assert p["x"][0] == pytest.approx(0.9, abs=1e-8)
    assert s.m["x"][0] == pytest.approx(0.1) and s.v["x"][0] == pytest.approx(0.001)


def test_adam_quadratic():
    p = {"x": np.array([1.0])}
    s = AdamState.zeros_like(p)
    for _ in range(100):
        adam_step(p, {"x": 2 * p["x"]}, s, 0.1)
    assert abs(p["x"][0]) < 1e-2


def test_adam_reference_sequence(rng):
    """Against a scalar re-implementation over a random gradient sequence."""
    p = {"a": rng.normal(size=3), "b": rng.normal(size=2)}
    ref = {k: v.tolist() for k, v in p.items()}
    s = AdamState.zeros_like(p)
    m = {k: [0.0] * len(v) for k, v in ref.items()}
    v2 = {k: [0.0] * len(v) for k, v in ref.items()}
    for t in range(1, 21):
        g = {k: rng.normal(size=len(v)) for k, v in ref.items()}
        adam_step(p, g, s, 0.01)
        for k in ref:
            for i in range(len(ref[k])):
                m[k][i] = 0.9 * m[k][i] + 0.1 * g[k][i]
                v2[k][i] = 0.999 * v2[k][i] + 0.001 * g[k][i] ** 2
                mh = m[k][i] / (1 - 0.9**t)
                vh = v2[k][i] / (1 - 0.999**t)
                ref[k][i] -= 0.01 * mh / (vh**0.5 + 1e-8)
    for k in ref:
        np.testing.assert_allclose(p[k], ref[k], rtol=0, atol=1e-13)


# --- config ----------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [{"steps": 0}, {"lr": 0.0}, {"eps": -1.0}, {"beta1": 1.0}, {"batch_size": 0}, {"k": 15}, {"m": 3}, {"log_every": 0}],
)
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_defaults():
    c = TrainConfig()
    assert (c.steps, c.batch_size, c.lr, c.beta1, c.beta2, c.eps, c.k, c.m) == (10_000, 32, 1e-3, 0.9, 0.999, 1e-8, 16, 2)
    assert c.weights == GapWeights(0.3, 0.5, 2.0, 0.15)


def test_config_round_trip(tmp_path):
    c = TrainConfig(lr=3e-4, weights=GapWeights(0.1, 0.2, 0.3, 0.1), scene=SceneSpec(background="checker"), data_seed=5)
    assert TrainConfig.from_json(c.to_json()) == c
    p = tmp_path / "c.json"
    p.write_text(c.to_json())
    assert TrainConfig.load(p) == c
    assert set(json.loads(c.to_json())) == set(c.to_dict())


def test_config_unknown_field():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"stepz": 3})


# --- checkpoint format -----------------------------------------------------


def random_checkpoint(rng):
    params = init_params(32, 8, 16, 3)
    for v in params.as_dict().values():
        v[...] = rng.normal(size=v.shape)
    adam = AdamState.zeros_like(params.as_dict())
    for d in (adam.m, adam.v):
        for v in d.values():
            v[...] = rng.normal(size=v.shape)
    adam.t = 17
    cfg = TrainConfig(c_mid=8)
    return Checkpoint(params, adam, cfg, rng.normal(size=(2, 4)), float(rng.normal()))


def assert_same(a: Checkpoint, b: Checkpoint):
    ta, tb = a.tensors(), b.tensors()
    assert list(ta) == list(tb)
    for k in ta:
        assert ta[k].tobytes() == tb[k].tobytes(), k
    assert a.config == b.config and a.adam.t == b.adam.t and a.final_total == b.final_total


def test_checkpoint_round_trip(tmp_path, rng):
    ck = random_checkpoint(rng)
    p = tmp_path / "x.gapc"
    save_checkpoint(ck, p)
    back = load_checkpoint(p)
    assert_same(ck, back)
    assert checkpoint_bytes(back) == p.read_bytes()


def test_checkpoint_layout(rng):
    """Walk the bytes by hand."""
    ck = random_checkpoint(rng)
    raw = checkpoint_bytes(ck)
    assert raw[:4] == b"GAPC"
    version, count = struct.unpack_from("<II", raw, 4)
    assert version == 1 and count == len(ck.tensors())
    pos = 12
    for name, arr in ck.tensors().items():
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        assert raw[pos : pos + nlen].decode() == name
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        assert dims == arr.shape
        data = np.frombuffer(raw, "<f8", count=arr.size, offset=pos)
        assert np.array_equal(data, arr.ravel())
        pos += 8 * arr.size
    (mlen,) = struct.unpack_from("<I", raw, pos)
    assert TrainConfig.from_dict(json.loads(raw[pos + 4 : pos + 4 + mlen])) == ck.config
    assert pos + 4 + mlen == len(raw)


def test_hand_built_container_decodes():
    name = "w".encode()
    raw = b"GAPC" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + name + struct.pack("<B2I", 2, 2, 3)
    raw += np.arange(6, dtype="<f8").tobytes()
    blob = b'{"a": 1}'
    raw += struct.pack("<I", len(blob)) + blob
    tensors, meta = container.decode(raw)
    assert np.array_equal(tensors["w"], np.arange(6.0).reshape(2, 3)) and meta == {"a": 1}


def test_bad_magic(rng):
    raw = bytearray(checkpoint_bytes(random_checkpoint(rng)))
    raw[0] ^= 0xFF
    with pytest.raises(BadMagicError, match="bad magic"):
        decode_checkpoint(bytes(raw))


def test_version_mismatch(rng):
    raw = bytearray(checkpoint_bytes(random_checkpoint(rng)))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        decode_checkpoint(bytes(raw))


@pytest.mark.parametrize("cut", [3, 10, 40, 500, -1])
def test_truncated(rng, cut):
    raw = checkpoint_bytes(random_checkpoint(rng))
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(raw[:cut])


def _dims_offset(raw, target):
    pos = 12
    while True:
        (nlen,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2 : pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        if name == target:
            return pos + 1
        dims = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
        pos += 1 + 4 * ndim + 8 * int(np.prod(dims))


def test_wrong_advertised_shape(rng):
    raw = bytearray(checkpoint_bytes(random_checkpoint(rng)))
    off = _dims_offset(bytes(raw), "conv1.bias")
    assert struct.unpack_from("<I", raw, off)[0] == 8
    raw[off : off + 4] = struct.pack("<I", 9)
    with pytest.raises(ContainerShapeError, match="conv1.bias"):
        decode_checkpoint(bytes(raw))


def test_wrong_leading_shape_rejected(rng):
    # a self-consistent first entry misaligns the stream; still nothing loads
    raw = bytearray(checkpoint_bytes(random_checkpoint(rng)))
    off = _dims_offset(bytes(raw), "conv1.weight")
    raw[off : off + 4] = struct.pack("<I", 9)
    with pytest.raises(ContainerError):
        decode_checkpoint(bytes(raw))


def test_shape_error_distinct_from_others():
    errs = {BadMagicError, VersionError, TruncatedFileError, ContainerShapeError}
    assert len(errs) == 4 and all(issubclass(e, ContainerError) for e in errs)


def test_trailing_bytes_rejected(rng):
    raw = checkpoint_bytes(random_checkpoint(rng)) + b"\0"
    with pytest.raises(ContainerError):
        decode_checkpoint(raw)


# --- training --------------------------------------------------------------


def test_batch_indices_pure():
    a = batch_indices(3, 7, 100, 32)
    assert np.array_equal(a, batch_indices(3, 7, 100, 32))
    assert not np.array_equal(a, batch_indices(3, 8, 100, 32))
    assert a.min() >= 0 and a.max() < 100


def test_pretrain_deterministic(small_data, small_ckpt):
    again = pretrain(SMALL, small_data)
    assert_same(small_ckpt, again)
    assert np.array_equal(small_ckpt.trace, again.trace)
    fresh = pretrain(SMALL)
    assert_same(small_ckpt, fresh)


def test_pretrain_history(small_ckpt):
    steps = [row[0] for row in small_ckpt.history]
    assert steps == [0, 10, 20, 29]
    for _, c, s, d, t in small_ckpt.history:
        assert t == pytest.approx(0.3 * c + 0.5 * s + 2.0 * d, rel=1e-12)
    assert small_ckpt.adam.t == SMALL.steps


def test_pretrain_final_loss_consistent(small_ckpt):
    fl = small_ckpt.final_loss
    np.testing.assert_allclose(fl[:, 3], fl[:, :3] @ np.array([0.3, 0.5, 2.0]), atol=1e-15)
    assert small_ckpt.final_total == pytest.approx(fl[:, 3].mean())
    assert small_ckpt.final_total == pytest.approx(small_ckpt.trace[-1], rel=1e-12)


def test_pretrain_reduces_loss():
    cfg = TrainConfig(steps=200, batch_size=8, c_mid=16, n_episodes=4, episode_length=6)
    ck = pretrain(cfg)
    assert ck.trace[-20:].mean() < ck.trace[:20].mean()


def test_backbone_untouched(small_data):
    before = FrozenBackbone.create(0).digest()
    pretrain(SMALL, small_data)
    assert FrozenBackbone.create(0).digest() == before


def test_non_finite_aborts(small_data):
    import copy

    bad = copy.deepcopy(small_data)
    bad.features[:] = np.nan
    with pytest.raises(FloatingPointError):
        pretrain(SMALL, bad)


# --- telemetry -------------------------------------------------------------


def test_loss_log(tmp_path, small_ckpt):
    p = tmp_path / "loss.csv"
    write_loss_log(small_ckpt.history, p)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS)
    assert len(lines) == 1 + len(small_ckpt.history)
    assert float(lines[-1].split(",")[-1]) == small_ckpt.history[-1][-1]


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.arange(6.0), 3), [1, 2, 3, 4])


def test_trend_violations():
    down = np.linspace(1.0, 0.1, 3000)
    assert trend_violations(down) == []
    noisy = down + 0.01 * np.random.default_rng(0).normal(size=3000)
    assert trend_violations(noisy) == []
    up = np.concatenate([down, np.full(1000, 0.5)])
    assert trend_violations(up)


@pytest.mark.slow
def test_default_run_loss_reduction(default_run):
    trace = default_run.ckpt.trace
    assert len(trace) == 10_000
    assert trace[-100:].mean() < 0.2 * trace[0]
    assert default_run.ckpt.final_total < 0.2 * trace[0]


@pytest.mark.slow
def test_default_run_trend(default_run):
    assert trend_violations(default_run.ckpt.trace, 500, 0.05) == []


@pytest.mark.slow
def test_default_run_backbone_hash(default_run):
    assert FrozenBackbone.create(default_run.ckpt.config.backbone_seed).digest() == (
        "fd760be03cea932d1991b73212854a63ee96df9e20f78787759e23a6d9d57b59"
    )
