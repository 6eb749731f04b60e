import numpy as np
import pytest

from mde_harden.autodiff import Tensor
from mde_harden.geometry import warp_field
from mde_harden.losses import photometric_error
from mde_harden.models import DepthNet, load_checkpoint, save_checkpoint
from mde_harden.training import (LOG_COLUMNS, SimSiamHeads, TrainConfig, TrainingError, clone_model, color_jitter,
                                 contrastive_loss, make_state, prepare_views, run_training, selfsup_loss,
                                 sup_pseudo_loss, train_step, train_step_sup_pseudo)
from mde_harden.validation import validate_csv

TINY = (4, 4, 4, 4, 4)


def _cfg(**kw):
    base = dict(widths=TINY, batch_size=2, steps=2, inner_steps=2, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def _sample(img, u, v):
    """Naive bilinear lookup of (3,H,W) ``img`` at float pixel coordinates."""
    H, W = img.shape[1:]
    u0 = np.clip(np.floor(u).astype(int), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 2)
    a, b = u - u0, v - v0
    return ((1 - a) * (1 - b) * img[:, v0, u0] + a * (1 - b) * img[:, v0, u0 + 1]
            + (1 - a) * b * img[:, v0 + 1, u0] + a * b * img[:, v0 + 1, u0 + 1])


def test_ground_truth_depth_reaches_reconstruction_floor(scenes):
    state = make_state(_cfg(perturbation="none", synthesis=False, mode="from-scratch"))
    state.K = scenes[0].K
    views = prepare_views(state, scenes, None)
    gt = Tensor(np.stack([s.depth for s in scenes])[:, None])
    l_p = selfsup_loss(state, views, gt).item()
    recon, masks = [], []
    for s in scenes:
        wf = warp_field(s.depth.astype(np.float64), s.T_t2s, s.K)
        recon.append(_sample(s.I0_s.astype(np.float64), wf.u, wf.v))
        masks.append(wf.valid)
    floor = photometric_error(Tensor(views.I_t, dtype=np.float64), Tensor(np.stack(recon), dtype=np.float64),
                              np.stack(masks)).item()
    assert abs(l_p - floor) <= 0.02
    const = selfsup_loss(state, views, Tensor(np.full(gt.shape, 10.0, np.float32))).item()
    assert l_p < const


def test_config_validation():
    for kw in (dict(methods=()), dict(methods=("mystery",)), dict(lr=0.0), dict(perturbation="L3"),
               dict(pose_mode="odometry"), dict(mode="resume"), dict(batch_size=0), dict(steps=-1)):
        with pytest.raises(TrainingError):
            TrainConfig(**kw)


def test_config_round_trip():
    c = _cfg(methods=("selfsup", "contrastive"), distance=(5.0, 30.0))
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_fine_tune_needs_a_model():
    with pytest.raises(TrainingError, match="initial model"):
        make_state(_cfg())


def test_zero_steps_returns_initial_weights(tmp_path, scenes, asset):
    net = DepthNet(TINY, seed=4)
    state, rows = run_training(_cfg(steps=0), scenes, asset, model=net, out_dir=tmp_path)
    assert rows == []
    back, _ = load_checkpoint(tmp_path / "checkpoint")
    assert all(np.array_equal(v, back.state_dict()[k]) for k, v in net.state_dict().items())


def test_combined_methods_sum(scenes, asset):
    state = make_state(_cfg(methods=("selfsup", "sup-pseudo")), DepthNet(TINY, seed=1))
    br = train_step(state, scenes[:2], asset)
    assert br.total == pytest.approx(br.l_p + br.l_sup, rel=1e-6)
    assert br.l_con == 0.0


def test_combination_is_order_independent(scenes, asset):
    net = DepthNet(TINY, seed=1)
    a = train_step(make_state(_cfg(methods=("selfsup", "sup-pseudo")), net), scenes[:2], asset)
    b = train_step(make_state(_cfg(methods=("sup-pseudo", "selfsup")), net), scenes[:2], asset)
    assert a.total == pytest.approx(b.total, rel=1e-6)


def test_reference_model_is_frozen(scenes, asset):
    state = make_state(_cfg(methods=("sup-pseudo",)), DepthNet(TINY, seed=2))
    ref = state.reference.state_dict()
    for _ in range(2):
        train_step_sup_pseudo(state, scenes[:2], asset)
    assert all(np.array_equal(v, state.reference.state_dict()[k]) for k, v in ref.items())
    assert any(not np.array_equal(v, state.model.state_dict()[k]) for k, v in ref.items())


def test_pseudo_loss_zero_when_model_equals_reference(scenes, asset):
    state = make_state(_cfg(methods=("sup-pseudo",), perturbation="none"), DepthNet(TINY, seed=2))
    state.K = scenes[0].K
    views = prepare_views(state, scenes[:2], asset)
    assert sup_pseudo_loss(state, views).item() == 0.0


def test_pseudo_loss_decreases(scenes):
    state = make_state(_cfg(methods=("sup-pseudo",), perturbation="none", synthesis=False, lr=3e-3),
                       DepthNet(TINY, seed=2))
    state.reference = DepthNet(TINY, seed=9, init_depth=4.0)
    batch = scenes[:2]
    losses = [train_step(state, batch, None).l_sup for _ in range(100)]
    assert losses[-1] < 0.5 * losses[0]


def test_selfsup_descent_on_fixed_batch(scenes):
    wins = 0
    for seed in range(10):
        state = make_state(_cfg(perturbation="none", synthesis=False, mode="from-scratch", seed=seed))
        batch = [scenes[seed % 6], scenes[(seed + 1) % 6]]
        first = train_step(state, batch, None).l_p
        second = train_step(state, batch, None).l_p
        wins += second <= first
    assert wins >= 8


def test_contrastive_heads_and_stop_gradient(scenes, asset):
    state = make_state(_cfg(methods=("contrastive",)), DepthNet(TINY, seed=3))
    assert isinstance(state.heads, SimSiamHeads)
    state.K = scenes[0].K
    views = prepare_views(state, scenes[:2], asset)
    loss = contrastive_loss(state, views)
    assert -1.0 <= loss.item() <= 1.0
    loss.backward()
    assert state.heads.pred1.weight.grad is not None
    assert state.model.enc[0].weight.grad is not None


def test_contrastive_loss_symmetric_under_branch_swap(scenes, asset):
    state = make_state(_cfg(methods=("contrastive",), jitter=0.0), DepthNet(TINY, seed=3))
    state.K = scenes[0].K
    v = prepare_views(state, scenes[:2], asset)
    swapped = type(v)(v.I_adv, v.I_s, v.I_t, v.R, v.t)
    assert contrastive_loss(state, v).item() == pytest.approx(contrastive_loss(state, swapped).item(), rel=1e-6)


def test_color_jitter_stays_in_range(rng):
    x = rng.random((3, 3, 8, 8)).astype(np.float32)
    y = color_jitter(x, np.random.default_rng(0), 0.5)
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1
    assert np.array_equal(color_jitter(x, np.random.default_rng(0), 0.0), x)


def test_perturbation_frozen_during_model_step(scenes, asset):
    """The adversarial view is fixed before the model update: repeating prepare_views at the
    same step with the same weights reproduces it exactly."""
    state = make_state(_cfg(warm_start=False), DepthNet(TINY, seed=5))
    state.K = scenes[0].K
    a = prepare_views(state, scenes[:2], asset)
    b = prepare_views(state, scenes[:2], asset)
    assert np.array_equal(a.I_adv, b.I_adv)
    assert not np.array_equal(a.I_adv, a.I_t)


def test_warm_start_carries_attack_state(scenes, asset):
    state = make_state(_cfg(), DepthNet(TINY, seed=5))
    assert state.carry is None
    train_step(state, scenes[:2], asset)
    assert state.carry is not None


def test_training_is_deterministic(tmp_path, scenes, asset):
    net = DepthNet(TINY, seed=6)
    for d in ("a", "b"):
        run_training(_cfg(steps=3), scenes, asset, model=net, out_dir=tmp_path / d)
    assert (tmp_path / "a/checkpoint/params.dht").read_bytes() == (tmp_path / "b/checkpoint/params.dht").read_bytes()
    assert (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()


def test_log_and_checkpoints(tmp_path, scenes, asset):
    cfg = _cfg(steps=4, eval_every=2, eval_scenes=2, checkpoint_every=2)
    _, rows = run_training(cfg, scenes[:4], asset, model=DepthNet(TINY), eval_scenes=scenes[4:], out_dir=tmp_path)
    assert [r[0] for r in rows] == [1, 2, 3, 4]
    assert rows[0][5] == "" and isinstance(rows[1][5], float)
    validate_csv(tmp_path / "train_log.csv", "train_log")
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0].split(",")
    assert header == LOG_COLUMNS
    assert (tmp_path / "checkpoints/step_000002/params.dht").exists()
    assert (tmp_path / "checkpoints/step_000004/manifest.json").exists()


def test_learned_pose_converges_to_identity_on_constant_pairs(scenes):
    cfg = _cfg(perturbation="none", synthesis=False, mode="from-scratch", pose_mode="learned", lr=1e-3, batch_size=1)
    state = make_state(cfg)
    same = [type(s)(**{**s.__dict__, "I0_s": s.I0_t}) for s in scenes[:1]]
    for _ in range(200):
        train_step(state, same, None)
    vec = state.pose(Tensor(same[0].I0_t[None]), Tensor(same[0].I0_t[None])).data[0]
    assert np.linalg.norm(vec[3:]) < 0.05
    assert state.pose is not None and len(state.trainable()) > len(state.model.parameters())


def test_empty_dataset_rejected(asset):
    with pytest.raises(TrainingError):
        run_training(_cfg(), [], asset, model=DepthNet(TINY))


def test_clone_is_independent():
    net = DepthNet(TINY, seed=8)
    twin = clone_model(net)
    assert all(np.array_equal(v, twin.state_dict()[k]) for k, v in net.state_dict().items())
    assert twin.stem.weight is not net.stem.weight


def test_checkpoint_of_trained_model_loads(tmp_path, scenes, asset):
    state, _ = run_training(_cfg(steps=1), scenes, asset, model=DepthNet(TINY))
    save_checkpoint(state.model, tmp_path, state.step)
    back, m = load_checkpoint(tmp_path)
    assert m["step"] == 1


def test_fresh_net_trains_down_photometric_loss(spec):
    from mde_harden.scenes import generate_scenes
    data = generate_scenes(spec, 16, seed=3)
    cfg = TrainConfig(perturbation="none", synthesis=False, mode="from-scratch", widths=(4, 8, 8, 8, 8),
                      steps=500, batch_size=4, lr=1e-3)

    def l_p(state):
        state.K = data[0].K
        return selfsup_loss(state, prepare_views(state, data, None)).item()

    before = l_p(make_state(cfg))
    trained, _ = run_training(cfg, data, None)
    assert l_p(trained) <= 0.5 * before
