import math

import numpy as np
import pytest

from geoanchor.gaploss import mask_centroid_and_area
from geoanchor.imageio import read_pgm, read_ppm, to_bytes
from geoanchor.numerics import ShapeError
from geoanchor.proxyscene import (
    CHECKER_COLORS,
    Entity,
    FrozenBackbone,
    PlacementError,
    SceneSpec,
    _advance,
    backbone_features,
    build_proxy_dataset,
    compose,
    downsample_mask,
    dump_episode,
    generate_episode,
    render_scene,
)

SPEC = SceneSpec()
BACKBONE = FrozenBackbone.create(0)


def disc_entity(cx=32.0, cy=32.0, r=16.0, color=(0.85, 0.12, 0.12)):
    return Entity("disc", color, cx, cy, r, r)


# --- spec ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"height": 62},
        {"background": "stripes"},
        {"palette": ((0, 0, 0),) * 5},
        {"shapes": ("triangle",)},
        {"shapes": ()},
        {"size_range": (0.3, 0.1)},
        {"n_entities": 0},
    ],
)
def test_spec_rejects_invalid(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


def test_spec_round_trip():
    s = SceneSpec(background="checker", palette_shift=2, seed=7)
    assert SceneSpec.from_dict(s.to_dict()) == s


def test_variants():
    assert SPEC.variant("checker").background == "checker"
    assert SPEC.variant("palette-shift").entity_color(0) == SPEC.palette[3]
    assert SPEC.variant("plain") == SPEC
    with pytest.raises(ValueError):
        SPEC.variant("cross-sim")


def test_palette_distinct():
    colors = set(SPEC.palette) | {(1.0, 1.0, 1.0)} | set(CHECKER_COLORS)
    assert len(colors) == len(SPEC.palette) + 1 + 1


# --- rendering -------------------------------------------------------------


def test_centered_disc_area():
    _, masks = compose(SPEC, [disc_entity()])
    expected = math.pi * 16.0**2 / (64 * 64)
    assert abs(masks[0].mean() - expected) / expected < 0.03


def test_rendered_disc_area():
    spec = SceneSpec(n_entities=1, shapes=("disc",), size_range=(math.pi / 16, math.pi / 16))
    for seed in range(5):
        s = render_scene(spec, seed)
        assert abs(s.masks[0].mean() - math.pi / 16) / (math.pi / 16) < 0.03


def test_hard_edges():
    s = render_scene(SPEC, 3)
    vals = {tuple(v) for v in s.image.reshape(3, -1).T}
    assert vals <= {(1.0, 1.0, 1.0)} | {SPEC.entity_color(m) for m in range(2)}


def test_render_deterministic():
    a, b = render_scene(SPEC, 11), render_scene(SPEC, 11)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.masks, b.masks)
    c = render_scene(SPEC, 12)
    assert not np.array_equal(a.masks, c.masks)


@pytest.mark.parametrize("seed", range(20))
def test_masks_disjoint_and_nonempty(seed):
    s = render_scene(SPEC.variant("checker"), seed)
    assert not (s.masks[0] & s.masks[1]).any()
    assert not (s.feature_masks[0] & s.feature_masks[1]).any()
    assert s.masks.any(axis=(1, 2)).all() and s.feature_masks.any(axis=(1, 2)).all()
    assert s.feature_masks.shape == (2, 16, 16)
    assert s.image.min() >= 0 and s.image.max() <= 1


@pytest.mark.parametrize("variant", ["plain", "checker", "palette-shift"])
@pytest.mark.parametrize("seed", range(5))
def test_mask_fidelity(variant, seed):
    spec = SPEC.variant(variant)
    s = render_scene(spec, seed)
    for m, mk in enumerate(s.masks):
        painted = (s.image == np.array(spec.entity_color(m))[:, None, None]).all(axis=0)
        assert np.array_equal(painted, mk)


@pytest.mark.parametrize("seed", range(5))
def test_checker_independent_of_masks(seed):
    s = render_scene(SPEC.variant("checker"), seed)
    union = s.masks.any(axis=0)
    for col in CHECKER_COLORS:
        patch = (s.image == np.array(col)[:, None, None]).all(axis=0)
        assert patch.any() and not (patch & union).any()
    # masks are unchanged by the background style
    assert np.array_equal(s.masks, render_scene(SPEC, seed).masks)


def test_placement_error():
    with pytest.raises(PlacementError, match="smaller"):
        render_scene(SceneSpec(n_entities=4, size_range=(0.25, 0.3)), 0)
    with pytest.raises(PlacementError):
        render_scene(SceneSpec(n_entities=1, shapes=("disc",), size_range=(0.9, 0.95)), 0)


def test_lshape_area():
    e = Entity("lshape", SPEC.palette[0], 32.0, 32.0, 12.0, 12.0, orient=1)
    _, masks = compose(SPEC, [e])
    assert masks[0].sum() == 3 * 12 * 12
    assert not masks[0][20:32, 32:44].any()


# --- episodes --------------------------------------------------------------


def test_episode_length_checked():
    with pytest.raises(ValueError):
        generate_episode(SPEC, 0, 1)


def test_episode_ids():
    frames = generate_episode(SPEC, 0, 5, episode=7)
    assert [f.t for f in frames] == list(range(5))
    assert {f.episode for f in frames} == {7}


def test_zero_velocity_frames_identical():
    frames = generate_episode(SPEC, 1, 6, velocities=np.zeros((2, 2)))
    for f in frames[1:]:
        assert np.array_equal(f.image, frames[0].image)
        assert np.array_equal(f.masks, frames[0].masks)


def test_known_velocity_advances_centroid():
    spec = SceneSpec(n_entities=1, shapes=("rectangle",), size_range=(0.05, 0.05))
    frames = generate_episode(spec, 4, 30, velocities=[[2.0, 0.0]])
    xs = [mask_centroid_and_area(f.masks[0])[0][0] for f in frames]
    steps = np.diff(xs)
    first_back = int(np.argmax(steps < 0)) if (steps < 0).any() else len(steps)
    assert first_back >= 1
    np.testing.assert_allclose(steps[: first_back - 1], 2.0 / 64, atol=1e-12)


def test_reflection_stays_inside():
    e = Entity("rectangle", SPEC.palette[0], 20.0, 40.0, 6.0, 4.5)
    vx, vy = 1.37, -0.91
    for _ in range(200):
        e, vx, vy = _advance(e, vx, vy, SPEC)
        assert e.half_w <= e.cx <= SPEC.width - e.half_w
        assert e.half_h <= e.cy <= SPEC.height - e.half_h
    spec = SceneSpec(n_entities=1, max_speed=1.5)
    frames = generate_episode(spec, 9, 200)
    area0 = frames[0].masks[0].sum()
    for f in frames:
        assert f.masks[0].any()
        # a clipped entity would lose pixels
        assert abs(int(f.masks[0].sum()) - int(area0)) <= 2 * (f.masks[0].any(axis=0).sum() + f.masks[0].any(axis=1).sum())


def test_episode_masks_disjoint():
    for f in generate_episode(SPEC, 5, 40):
        assert not (f.masks[0] & f.masks[1]).any()
        assert f.feature_masks.any(axis=(1, 2)).all()


def test_dataset_deterministic():
    a = build_proxy_dataset(SPEC, 2, 3, 42, BACKBONE)
    b = build_proxy_dataset(SPEC, 2, 3, 42, BACKBONE)
    assert len(a) == 6
    for key in ("features", "feature_masks", "centroids", "areas", "episode", "t"):
        assert np.array_equal(getattr(a, key), getattr(b, key))
    assert list(a.episode) == [0, 0, 0, 1, 1, 1] and list(a.t) == [0, 1, 2] * 2


# --- dumps -----------------------------------------------------------------


def test_dump_round_trip(tmp_path):
    frames = generate_episode(SPEC, 3, 2, episode=4)
    paths = dump_episode(frames, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == sorted(f"ep4_t{t}_{k}" for t in (0, 1) for k in ("img.ppm", "mask0.pgm", "mask1.pgm"))
    for f in frames:
        img = read_ppm(tmp_path / f"ep4_t{f.t}_img.ppm")
        assert np.array_equal(img, to_bytes(f.image))
        for m in range(2):
            mk = read_pgm(tmp_path / f"ep4_t{f.t}_mask{m}.pgm")
            assert set(np.unique(mk)) <= {0, 255}
            assert np.array_equal(mk == 255, f.masks[m])
    assert (tmp_path / "ep4_t0_img.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")
    assert (tmp_path / "ep4_t0_mask0.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")


def test_read_rejects_wrong_magic(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(ValueError):
        read_ppm(p)


# --- downsampling ----------------------------------------------------------


def test_downsample_full():
    assert downsample_mask(np.ones((16, 16), bool)).all()


def test_downsample_single_block():
    m = np.zeros((16, 16), bool)
    m[4:8, 8:12] = True
    d = downsample_mask(m)
    assert d.sum() == 1 and d[1, 2]


def test_downsample_half_threshold():
    m = np.zeros((4, 4), bool)
    m.flat[:8] = True
    assert downsample_mask(m)[0, 0]
    m.flat[7] = False
    assert not downsample_mask(m)[0, 0]


def test_downsample_enumeration(rng):
    for _ in range(10):
        m = rng.random((32, 24)) < 0.5
        d = downsample_mask(m)
        for i in range(8):
            for j in range(6):
                assert d[i, j] == (m[4 * i : 4 * i + 4, 4 * j : 4 * j + 4].sum() >= 8)


def test_downsample_may_be_empty_and_checks_shape():
    assert not downsample_mask(np.zeros((8, 8), bool)).any()
    with pytest.raises(ValueError):
        downsample_mask(np.zeros((6, 8), bool))


# --- backbone --------------------------------------------------------------


def test_backbone_fixed_weights():
    assert BACKBONE.digest() == "fd760be03cea932d1991b73212854a63ee96df9e20f78787759e23a6d9d57b59"
    assert FrozenBackbone.create(0).digest() == BACKBONE.digest()
    assert FrozenBackbone.create(1).digest() != BACKBONE.digest()
    assert BACKBONE.w1.shape == (16, 3, 5, 5) and BACKBONE.w2.shape == (32, 16, 5, 5)
    with pytest.raises(ValueError):
        BACKBONE.w1[0, 0, 0, 0] = 1.0


def test_backbone_weight_scale():
    b = FrozenBackbone.create(3)
    assert abs(b.w2.std() * math.sqrt(16 * 25) - 1.0) < 0.05


def test_features_shape_and_zero():
    f = backbone_features(np.zeros((3, 64, 64)), BACKBONE)
    assert f.shape == (32, 16, 16) and not f.any()
    assert backbone_features(np.zeros((2, 3, 32, 48)), BACKBONE).shape == (2, 32, 8, 12)


def test_features_deterministic_and_batched():
    imgs = np.stack([render_scene(SPEC, s).image for s in range(3)])
    a = backbone_features(imgs[1], BACKBONE)
    assert np.array_equal(a, backbone_features(imgs[1], BACKBONE))
    np.testing.assert_allclose(backbone_features(imgs, BACKBONE, chunk=2)[1], a, atol=1e-12)


def test_features_translation_equivariant():
    a, _ = compose(SPEC, [disc_entity(28.0, 30.0, 9.0)])
    b, _ = compose(SPEC, [disc_entity(32.0, 30.0, 9.0)])
    fa, fb = backbone_features(a, BACKBONE), backbone_features(b, BACKBONE)
    assert np.abs(fa - fb).max() > 0.1
    np.testing.assert_allclose(fb[:, 3:-3, 4:-3], fa[:, 3:-3, 3:-4], atol=1e-12)


def test_features_reject_bad_input():
    with pytest.raises(ShapeError):
        backbone_features(np.zeros((1, 64, 64)), BACKBONE)
    with pytest.raises(ShapeError):
        backbone_features(np.zeros((3, 62, 64)), BACKBONE)
