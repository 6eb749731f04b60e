import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mde_harden.assets import ObjectAsset
from mde_harden.attacks import (AdversarialObject, AttackConfig, AttackError, PerturbationVars, adversarial_objective,
                                budget_report, build_plans, gen_l0_attack, gen_patch_attack, gen_pgd_attack,
                                generate_attack, l_pixel, patch_square, soft_l0_delta)
from mde_harden.autodiff import Tensor, gradcheck
from mde_harden.geometry import BoardPlacement
from mde_harden.synthesis import PlacementSampler


def _asset(h, w, seed=0, full=True):
    r = np.random.default_rng(seed)
    mask = np.ones((h, w), bool) if full else r.random((h, w)) > 0.3
    return ObjectAsset(r.uniform(0.2, 0.8, (3, h, w)), mask, 1.8 * w / max(h, w), 1.8 * h / max(h, w))


def _vars(bp, bn, maxp=1.0, gamma=0.05):
    return PerturbationVars(Tensor(np.asarray(bp, float), dtype=np.float64),
                            Tensor(np.asarray(bn, float), dtype=np.float64), maxp, gamma)


def test_soft_l0_delta_examples():
    assert np.all(soft_l0_delta(_vars(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))).data == 0)
    assert soft_l0_delta(_vars([2.0], [0.0])).data[0] == 1.0
    assert soft_l0_delta(_vars([0.5], [0.2])).data[0] == pytest.approx(0.3)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_soft_l0_delta_bounded_by_maxp(seed, maxp):
    r = np.random.default_rng(seed)
    d = soft_l0_delta(_vars(r.normal(0, 3, (3, 4, 5)), r.normal(0, 3, (3, 4, 5)), maxp)).data
    assert np.all(np.abs(d) <= maxp * (1 + 1e-6))


def test_l_pixel_examples():
    assert l_pixel(_vars(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))).item() == pytest.approx(4.0)
    bp = np.zeros((1, 2, 2))
    bp[0, 0, 0] = 1e6
    assert l_pixel(_vars(bp, np.zeros((1, 2, 2)))).item() == pytest.approx(2.5 + 2.0)


def test_l_pixel_matches_loop_reference(rng):
    bp, bn = rng.normal(0, 0.1, (3, 5, 6)), rng.normal(0, 0.1, (3, 5, 6))
    gamma = 0.05
    ref = 0.0
    for b in (bp, bn):
        for i in range(5):
            for j in range(6):
                ref += max(0.5 * (math.tanh(b[c, i, j] / gamma) + 1) for c in range(3))
    assert l_pixel(_vars(bp, bn, gamma=gamma)).item() == pytest.approx(ref, abs=1e-6)


@given(st.integers(0, 2**31 - 1), st.integers(0, 11))
def test_l_pixel_monotone_in_b_p(seed, idx):
    r = np.random.default_rng(seed)
    bp, bn = r.normal(0, 0.1, (1, 3, 4)), r.normal(0, 0.1, (1, 3, 4))
    values = []
    for x in (5.0, 0.5, 0.0, -0.5, -5.0):
        b = bp.copy()
        b.flat[idx] = x
        values.append(l_pixel(_vars(b, bn)).item())
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_perturbation_vars_validation():
    with pytest.raises(ValueError):
        _vars([np.inf], [0.0])
    with pytest.raises(ValueError):
        _vars([0.0], [0.0], maxp=0)
    with pytest.raises(ValueError):
        _vars([0.0], [0.0], gamma=-1)


def test_pgd_default_step_rule():
    c = AttackConfig(norm="Linf", eps=0.1)
    assert c.resolved_steps == 10
    assert c.resolved_step_size == pytest.approx(0.025)
    c = AttackConfig(norm="L2", eps=8)
    assert c.budget == pytest.approx(8 / 255)
    assert c.resolved_step_size == pytest.approx(2.5 * (8 / 255) / 10)


@pytest.mark.parametrize("kw", [dict(norm="L1"), dict(norm="patch", eps=0), dict(eps=-0.1),
                                dict(steps=-1), dict(eot_batch=0), dict(region="box")])
def test_attack_config_rejects(kw):
    with pytest.raises(AttackError):
        AttackConfig(**kw)


def test_patch_square_is_centred_and_sized():
    a = _asset(100, 100)
    rows, cols = patch_square(a, 0.1)
    assert rows.stop - rows.start == 32 and cols.stop - cols.start == 32
    assert (rows.start, cols.start) == (34, 34)


def test_patch_side_zero_is_an_error():
    with pytest.raises(AttackError, match="rounds to 0"):
        patch_square(_asset(4, 4), 0.01)


def test_config_round_trip():
    c = AttackConfig(norm="Linf", eps=0.05, sampler=PlacementSampler((5.0, 10.0), 15.0, 3), seed=9)
    back = AttackConfig.from_dict(c.to_dict())
    assert back.to_dict() == c.to_dict()


def test_budget_report_counts_threshold():
    d = np.zeros((3, 2, 2), np.float32)
    d[0, 0, 0] = 0.02
    d[1, 1, 1] = 0.005
    r = budget_report(d, np.ones((2, 2), bool))
    assert r["perturbed_pixels"] == 1 and r["l0_fraction"] == 0.25
    assert r["linf"] == pytest.approx(0.02)


# -- attacks against a tiny network ------------------------------------------------

def _cfg(norm, eps, steps=3, seed=0, **kw):
    return AttackConfig(norm=norm, eps=eps, steps=steps, eot_batch=1, seed=seed,
                        sampler=PlacementSampler((5.0, 10.0), 30.0, seed), **kw)


@pytest.mark.parametrize("norm,eps", [("L0", 0.1), ("Linf", 0.1), ("L2", 8.0), ("patch", 0.1)])
def test_budgets_hold(tiny_net, scenes, norm, eps):
    a = _asset(24, 48, seed=1, full=False)
    adv = generate_attack(tiny_net, a, scenes, _cfg(norm, eps, steps=5, step_size=0.3 if norm in ("L0", "patch") else None))
    assert np.all((adv.image >= 0) & (adv.image <= 1))
    r = adv.report
    if norm == "L0":
        assert r["l0_fraction"] <= eps
        assert r["perturbed_pixels"] <= math.floor(eps * a.mask.sum())
    elif norm == "Linf":
        assert r["linf"] <= eps
    elif norm == "L2":
        assert r["l2"] <= eps / 255
    else:
        rows, cols = patch_square(a, eps)
        outside = np.ones(a.mask.shape, bool)
        outside[rows, cols] = False
        assert np.all(adv.delta[:, outside] == 0)


def test_l0_budget_on_50x100_object(tiny_net, scenes):
    a = _asset(50, 100, seed=2)
    adv = gen_l0_attack(tiny_net, a, scenes, _cfg("L0", 0.1, steps=4, step_size=0.5))
    assert adv.report["perturbed_pixels"] <= 500


@pytest.mark.parametrize("norm,eps", [("L0", 0.1), ("patch", 0.1), ("Linf", 0.0), ("L0", 0.0)])
def test_trivial_attacks_return_benign_object(tiny_net, scenes, norm, eps):
    a = _asset(16, 32)
    steps = 0 if eps else 3
    adv = generate_attack(tiny_net, a, scenes, _cfg(norm, eps, steps=steps))
    assert np.array_equal(adv.image, a.image)
    assert np.all(adv.delta == 0)


def test_attack_is_deterministic(tiny_net, scenes):
    a = _asset(16, 32, seed=4)
    for norm, eps in (("L0", 0.1), ("Linf", 0.05)):
        x = generate_attack(tiny_net, a, scenes, _cfg(norm, eps, seed=5)).delta
        y = generate_attack(tiny_net, a, scenes, _cfg(norm, eps, seed=5)).delta
        assert np.array_equal(x, y)


def test_wrong_norm_entry_points(tiny_net, scenes):
    a = _asset(16, 32)
    with pytest.raises(AttackError):
        gen_l0_attack(tiny_net, a, scenes, _cfg("Linf", 0.1))
    with pytest.raises(AttackError):
        gen_pgd_attack(tiny_net, a, scenes, _cfg("L0", 0.1))
    with pytest.raises(AttackError):
        gen_patch_attack(tiny_net, a, scenes, _cfg("L2", 1.0))


def test_model_is_not_updated_by_attack(tiny_net, scenes):
    before = tiny_net.state_dict()
    generate_attack(tiny_net, _asset(16, 32), scenes, _cfg("L0", 0.1))
    after = tiny_net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_adversarial_object_save_load(tmp_path, tiny_net, scenes):
    a = _asset(16, 32)
    adv = generate_attack(tiny_net, a, scenes, _cfg("Linf", 0.05))
    adv.save(tmp_path / "adv.png")
    back = AdversarialObject.load(tmp_path / "adv.png")
    assert np.array_equal(back.image, adv.image) and back.report == adv.report
    assert back.config.to_dict() == adv.config.to_dict()


# -- objective ---------------------------------------------------------------------

def _placements(a, n):
    return [BoardPlacement(6.0 + i, 0.1 * i, a.W, a.H, a.w, a.h) for i in range(n)]


def test_objective_at_zero_vars_is_benign_plus_constant(tiny_net, scenes):
    a = _asset(8, 16)
    v = PerturbationVars.init(a.image.shape, 0.0)
    pls = _placements(a, 2)
    loss = adversarial_objective(tiny_net, a, scenes[:2], pls, v).item()
    plans = build_plans(a, scenes[:2], pls)
    benign = 0.0
    for p in plans:
        inv = 1.0 / tiny_net(p.target_image()[None]).data[0, 0]
        benign += float((inv[p.target.mask] ** 2).mean())
    assert loss == pytest.approx(benign / 2 + l_pixel(v).item(), rel=1e-5)


def test_objective_all_invisible_raises(tiny_net, scenes):
    a = _asset(8, 16)
    v = PerturbationVars.init(a.image.shape, 0.0)
    far = [BoardPlacement(5e-4, 0.0, a.W, a.H, a.w, a.h)]
    with pytest.raises(AttackError, match="no batch element"):
        adversarial_objective(tiny_net, a, scenes[:1], far, v)


def test_objective_gradient_through_network(tiny_net, scenes, rng):
    a = _asset(4, 4, seed=6)
    pls = _placements(a, 1)
    bn = rng.uniform(0.1, 0.3, a.image.shape)
    bp0 = rng.uniform(0.2, 0.8, a.image.shape)                 # 48 elements, inside the clip range

    def fn(t):
        v = PerturbationVars(t[0], Tensor(bn, dtype=t[0].dtype), 1.0, 0.5)
        return adversarial_objective(tiny_net, a, scenes[:1], pls, v, pixel_weight=1e-3)

    with tiny_net.frozen():
        assert gradcheck(fn, [bp0], eps=1e-3) <= 1e-2


def test_l0_attack_pushes_object_further(scenes):
    from mde_harden.models import DepthNet
    net = DepthNet(widths=(4, 6, 8, 8, 8), seed=11)
    a = _asset(20, 40, seed=3)
    # an untrained net has a weak input gradient, so the relative sparsity weight is scaled down
    cfg = AttackConfig(norm="L0", eps=0.1, steps=200, step_size=0.05, eot_batch=2, sparsity_weight=1e-5,
                       sampler=PlacementSampler((5.0, 10.0), 30.0, 0))
    adv = gen_l0_attack(net, a, scenes, cfg)
    pls = _placements(a, 3)
    benign, attacked = [], []
    for p_b, p_a in zip(build_plans(a, scenes[:3], pls), build_plans(adv.as_asset(a), scenes[:3], pls)):
        m = p_b.target.mask
        benign.append(net(p_b.target_image()[None]).data[0, 0][m].mean())
        attacked.append(net(p_a.target_image()[None]).data[0, 0][m].mean())
    assert np.mean(attacked) > np.mean(benign)
