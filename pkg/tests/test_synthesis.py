import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mde_harden import autodiff as ad
from mde_harden.assets import ObjectAsset, load_asset, make_car_asset, save_asset
from mde_harden.autodiff import Tensor
from mde_harden.geometry import BoardPlacement, GeometryError, Intrinsics, RigidTransform
from mde_harden.scenes import SceneSample
from mde_harden.synthesis import (GAIN_RANGE, PlacementSampler, SynthesisPlan, dilate, lighting_gain,
                                  lighting_match, luminance, object_consistency, prefilter_matrices,
                                  sample_placement, synthesize_pair, try_plan)


def flat_scene(K, value=0.3, seed=0):
    r = np.random.default_rng(seed)
    It = r.uniform(0.1, 0.9, (3, K.height, K.width)).astype(np.float32)
    Is = r.uniform(0.1, 0.9, (3, K.height, K.width)).astype(np.float32)
    return SceneSample(It, Is, RigidTransform.translation((-0.54, 0, 0)), K)


# -- placement sampling ----------------------------------------------------------------

def test_degenerate_ranges(asset):
    s = PlacementSampler((5.0, 5.0), 0.0, seed=3)
    for k in range(20):
        p = sample_placement(s, k, asset)
        assert p.z_c == 5.0 and p.alpha == 0.0


def test_replay_is_identical(asset):
    s = PlacementSampler((5.0, 30.0), 30.0, seed=9)
    assert sample_placement(s, 17, asset) == sample_placement(s, 17, asset)
    assert sample_placement(s, 17, asset) != sample_placement(s, 18, asset)


def test_uniform_mean(asset):
    s = PlacementSampler((5.0, 10.0), 30.0, seed=1)
    z = np.array([s.draw(k, asset).z_c for k in range(10_000)])
    a = np.array([s.draw(k, asset).alpha_deg for k in range(2_000)])
    assert abs(z.mean() - 7.5) <= 0.05 * 7.5
    assert z.min() >= 5 and z.max() <= 10 and np.abs(a).max() <= 30


@pytest.mark.parametrize("dist,ang", [((0.0, 5.0), 10.0), ((6.0, 5.0), 10.0), ((5.0, 6.0), 90.0), ((5.0, 6.0), -1.0)])
def test_sampler_validation(dist, ang):
    with pytest.raises(ValueError):
        PlacementSampler(dist, ang)


# -- compositing --------------------------------------------------------------------------

def rect_setup():
    """Board whose 21x21 pixels land exactly on image pixels [40..60] x [20..40]."""
    K = Intrinsics(100.0, 100.0, 50.0, 30.0, 128, 64)
    r = np.random.default_rng(2)
    a = ObjectAsset(r.random((3, 21, 21)).astype(np.float32), np.ones((21, 21), bool), 2.1, 2.1)
    return K, a, BoardPlacement(10.0, 0.0, 2.1, 2.1, 21, 21)


def test_axis_aligned_rectangle():
    K, a, p = rect_setup()
    sc = flat_scene(K)
    v = synthesize_pair(a, sc, p, lighting=False)
    expect = np.zeros((K.height, K.width), bool)
    expect[20:41, 40:61] = True
    np.testing.assert_array_equal(v.mask_t, expect)
    np.testing.assert_allclose(v.I_t[:, 20:41, 40:61], a.image, atol=1e-6)
    np.testing.assert_array_equal(v.I_t[:, ~expect], sc.I0_t[:, ~expect])


def test_empty_mask_leaves_backgrounds_untouched(K, scenes):
    a = make_car_asset()
    blank = ObjectAsset(a.image, np.zeros_like(a.mask), a.W, a.H)
    p = BoardPlacement(6.0, 0.0, a.W, a.H, a.w, a.h)
    v = synthesize_pair(blank, scenes[0], p)
    assert np.array_equal(v.I_t, scenes[0].I0_t)
    assert np.array_equal(v.I_s, scenes[0].I0_s)
    assert try_plan(blank, scenes[0], p) is None


def test_board_at_camera_is_rejected(K, scenes):
    a = make_car_asset()
    p = BoardPlacement(5e-4, 0.0, a.W, a.H, a.w, a.h)
    with pytest.raises(GeometryError):
        synthesize_pair(a, scenes[0], p)
    assert try_plan(a, scenes[0], p) is None


def test_zero_perturbation_is_bit_exact(asset, scenes):
    p = BoardPlacement(7.0, math.radians(12), asset.W, asset.H, asset.w, asset.h)
    v = synthesize_pair(asset, scenes[1], p, perturbed=asset.image.copy())
    assert np.array_equal(v.I_adv_t, v.I_t)


def test_perturbation_only_changes_object_region(asset, scenes):
    p = BoardPlacement(6.0, 0.2, asset.W, asset.H, asset.w, asset.h)
    adv = np.clip(asset.image + 0.3, 0, 1)
    v = synthesize_pair(asset, scenes[2], p, perturbed=adv)
    diff = np.any(v.I_adv_t != v.I_t, axis=0)
    assert diff.any() and not (diff & ~v.mask_t).any()


@given(st.floats(4.0, 40.0), st.floats(-45.0, 45.0), st.integers(0, 5))
def test_outside_mask_bit_identical(z, a_deg, idx):
    asset, sc = _ASSET, _SCENES[idx]
    v = synthesize_pair(asset, sc, BoardPlacement(z, math.radians(a_deg), asset.W, asset.H, asset.w, asset.h))
    assert np.array_equal(v.I_t[:, ~v.mask_t], sc.I0_t[:, ~v.mask_t])
    assert np.array_equal(v.I_s[:, ~v.mask_s], sc.I0_s[:, ~v.mask_s])


@given(st.floats(-40.0, 40.0), st.floats(3.0, 30.0), st.floats(0.5, 10.0))
def test_area_non_increasing_with_distance(a_deg, z, dz):
    asset, sc = _ASSET, _SCENES[0]
    areas = []
    for zz in (z, z + dz):
        plan = SynthesisPlan(asset, sc, BoardPlacement(zz, math.radians(a_deg), asset.W, asset.H, asset.w, asset.h))
        areas.append(plan.target.area)
    assert areas[1] <= areas[0]


def test_synthesis_is_deterministic(asset, scenes):
    p = BoardPlacement(9.0, -0.3, asset.W, asset.H, asset.w, asset.h)
    a, b = synthesize_pair(asset, scenes[3], p), synthesize_pair(asset, scenes[3], p)
    assert np.array_equal(a.I_t, b.I_t) and np.array_equal(a.I_s, b.I_s)


def test_render_target_matches_composite_and_is_differentiable(asset, scenes):
    plan = SynthesisPlan(asset, scenes[0], BoardPlacement(6.0, 0.1, asset.W, asset.H, asset.w, asset.h))
    x = Tensor(asset.image, requires_grad=True)
    out = plan.render_target(x)
    np.testing.assert_allclose(out.data, plan.target_image(), atol=1e-6)
    ad.reduce_sum(out).backward()
    assert x.grad.shape == asset.image.shape and np.abs(x.grad).sum() > 0


def test_object_region_consistency(asset, scenes):
    s = PlacementSampler((5.0, 30.0), 30.0, seed=4)
    errs = []
    for i, sc in enumerate(scenes):
        v = synthesize_pair(asset, sc, s.draw(i, asset))
        e, n = object_consistency(v, sc)
        if n:
            errs.append(e)
    assert errs and np.mean(errs) <= 3 / 255


def test_prefilter_is_identity_when_board_is_magnified(asset, K):
    rows, cols = prefilter_matrices(asset, BoardPlacement(2.0, 0.0, asset.W, asset.H, asset.w, asset.h), K)
    assert np.array_equal(rows, np.eye(asset.h)) and np.array_equal(cols, np.eye(asset.w))
    rows, cols = prefilter_matrices(asset, BoardPlacement(30.0, 0.0, asset.W, asset.H, asset.w, asset.h), K)
    np.testing.assert_allclose(rows.sum(1), 1, atol=1e-6)
    assert not np.allclose(rows, np.eye(asset.h))


# -- lighting ---------------------------------------------------------------------------------

def _lighting_case(obj_level, ring_level):
    mask = np.zeros((20, 20), bool)
    mask[7:13, 7:13] = True
    obj = np.full((3, 20, 20), obj_level, np.float32)
    bg = np.full((3, 20, 20), ring_level, np.float32)
    return obj, bg, mask


def test_equal_means_give_unit_gain():
    obj, bg, mask = _lighting_case(0.4, 0.4)
    out, g = lighting_match(obj, bg, mask)
    assert g == pytest.approx(1.0) and np.allclose(out, obj)


def test_gain_clamps_at_two():
    obj, bg, mask = _lighting_case(0.2, 0.4)
    assert lighting_gain(obj, bg, mask) == pytest.approx(2.0)
    obj, bg, mask = _lighting_case(0.2, 0.9)
    assert lighting_gain(obj, bg, mask) == GAIN_RANGE[1]
    obj, bg, mask = _lighting_case(0.9, 0.1)
    assert lighting_gain(obj, bg, mask) == GAIN_RANGE[0]


def test_unclamped_gain_matches_ring_mean():
    r = np.random.default_rng(3)
    obj = r.uniform(0.2, 0.5, (3, 20, 20)).astype(np.float32)
    bg = r.uniform(0.3, 0.6, (3, 20, 20)).astype(np.float32)
    mask = np.zeros((20, 20), bool)
    mask[6:14, 5:15] = True
    out, g = lighting_match(obj, bg, mask)
    ring = dilate(mask, 5) & ~mask
    assert GAIN_RANGE[0] < g < GAIN_RANGE[1]
    assert abs(luminance(out)[mask].mean() - luminance(bg)[ring].mean()) <= 1e-3


def test_empty_ring_gives_unit_gain():
    obj, bg, _ = _lighting_case(0.2, 0.8)
    assert lighting_gain(obj, bg, np.ones((20, 20), bool)) == 1.0


def test_empty_object_region_rejected():
    obj, bg, _ = _lighting_case(0.2, 0.8)
    with pytest.raises(ValueError):
        lighting_gain(obj, bg, np.zeros((20, 20), bool))


def test_lighting_can_be_disabled():
    obj, bg, mask = _lighting_case(0.2, 0.8)
    out, g = lighting_match(obj, bg, mask, enabled=False)
    assert g == 1.0 and np.array_equal(out, obj)


def test_dilate_is_chebyshev():
    m = np.zeros((11, 11), bool)
    m[5, 5] = True
    d = dilate(m, 2)
    assert d.sum() == 25 and d[3:8, 3:8].all()


# -- asset files ---------------------------------------------------------------------------------

def test_asset_round_trip(tmp_path, asset):
    save_asset(asset, tmp_path)
    b = load_asset(tmp_path)
    assert np.array_equal(b.mask, asset.mask) and b.W == asset.W
    assert np.abs(b.image - asset.image).max() <= 0.5 / 255 + 1e-6


def test_missing_asset_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="object.png"):
        load_asset(tmp_path)


def test_asset_aspect_validation():
    with pytest.raises(ValueError):
        ObjectAsset(np.zeros((3, 10, 20)), np.ones((10, 20), bool), 2.0, 2.0)


_ASSET = make_car_asset()
_SCENES = None


@pytest.fixture(autouse=True, scope="module")
def _module_scenes(scenes):
    global _SCENES
    _SCENES = scenes
