"""Hardening loops: self-supervised adversarial training plus two baselines.

Each step alternates two phases. First an adversarial object is optimised
against the frozen depth network over the step's (scene, placement) batch.
Then the network takes one optimiser step on the perturbed target views with
the perturbation held fixed. Enabled loss terms are summed with unit weights.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import io as dio
from .assets import ObjectAsset
from .attacks import AttackConfig, optimize
from .autodiff import Tensor
from .evaluation import benign_eval
from .geometry import Intrinsics, reconstruct_view, warp_grid
from .losses import masked_mse, negative_cosine, photometric_error
from .models import DepthNet, PoseNet, pose_vector_to_rt, save_checkpoint
from .nn import Adam, Linear, Module
from .scenes import SceneSample
from .synthesis import PlacementSampler, try_plan

METHODS = ("selfsup", "sup-pseudo", "contrastive")
PERTURBATIONS = ("L0", "PGD", "none")
LOG_COLUMNS = ["step", "l_p", "l_sup", "l_con", "total", "benign_abse"]


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    methods: tuple = ("selfsup",)
    perturbation: str = "L0"
    eps: float = 0.1
    inner_steps: int = 10
    attack_lr: float = 0.05
    warm_start: bool = True
    sparsity_weight: float = 1e-3
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 2000
    pose_mode: str = "fixed"
    distance: tuple = (5.0, 10.0)
    angle_deg: float = 30.0
    seed: int = 0
    mode: str = "fine-tune"
    lighting: bool = True
    synthesis: bool = True
    jitter: float = 0.2
    eval_every: int = 0
    eval_scenes: int = 8
    checkpoint_every: int = 0
    widths: tuple = (8, 16, 24, 32, 48)

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if not self.methods:
            raise TrainingError("method set must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise TrainingError(f"unknown training methods {bad}; expected a subset of {METHODS}")
        if self.perturbation not in PERTURBATIONS:
            raise TrainingError(f"unknown perturbation {self.perturbation!r}")
        if not self.lr > 0:
            raise TrainingError("learning rate must be positive")
        if self.pose_mode not in ("fixed", "learned"):
            raise TrainingError(f"unknown pose mode {self.pose_mode!r}")
        if self.mode not in ("fine-tune", "from-scratch"):
            raise TrainingError(f"unknown training mode {self.mode!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise TrainingError("batch_size must be >= 1 and steps >= 0")

    @property
    def sampler(self) -> PlacementSampler:
        return PlacementSampler(tuple(self.distance), self.angle_deg, self.seed)

    def attack_config(self) -> AttackConfig:
        norm = {"L0": "L0", "PGD": "Linf"}.get(self.perturbation, "L0")
        return AttackConfig(norm=norm, eps=self.eps, steps=self.inner_steps,
                            step_size=self.attack_lr if norm == "L0" else None,
                            eot_batch=self.batch_size, sampler=self.sampler, seed=self.seed,
                            sparsity_weight=self.sparsity_weight, lighting=self.lighting)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("methods", "distance", "widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("methods", "distance", "widths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class SimSiamHeads(Module):
    """Projection (C -> 128 -> 128) and prediction (128 -> 64 -> 128) MLPs."""

    def __init__(self, embed_dim: int, seed: int = 0):
        rng = np.random.default_rng([seed, 17])
        self.proj1 = Linear(embed_dim, 128, rng)
        self.proj2 = Linear(128, 128, rng)
        self.pred1 = Linear(128, 64, rng)
        self.pred2 = Linear(64, 128, rng)

    def project(self, e: Tensor) -> Tensor:
        return self.proj2(ad.relu(self.proj1(e)))

    def predict(self, z: Tensor) -> Tensor:
        return self.pred2(ad.relu(self.pred1(z)))


@dataclass
class LossBreakdown:
    l_p: float = 0.0
    l_sup: float = 0.0
    l_con: float = 0.0
    total: float = 0.0

    def row(self, step: int, benign_abse="") -> list:
        return [step, self.l_p, self.l_sup, self.l_con, self.total, benign_abse]


@dataclass
class TrainerState:
    config: TrainConfig
    model: DepthNet
    reference: Optional[DepthNet] = None
    pose: Optional[PoseNet] = None
    heads: Optional[SimSiamHeads] = None
    optimizer: Optional[Adam] = None
    step: int = 0
    K: Optional[Intrinsics] = None
    carry: Any = None        # inner-attack variables kept between steps
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def trainable(self) -> list[Tensor]:
        params = self.model.parameters()
        if self.pose is not None and self.config.pose_mode == "learned":
            params += self.pose.parameters()
        if self.heads is not None:
            params += self.heads.parameters()
        return params


def clone_model(net: DepthNet) -> DepthNet:
    twin = DepthNet(net.widths, d_min=net.mapping.d_min, d_max=net.mapping.d_max)
    twin.load_state_dict(net.state_dict())
    return twin


def make_state(config: TrainConfig, model: Optional[DepthNet] = None) -> TrainerState:
    if config.mode == "from-scratch" or model is None:
        if config.mode == "fine-tune" and model is None:
            raise TrainingError("fine-tune mode needs an initial model")
        model = DepthNet(config.widths, seed=config.seed)
    else:
        model = clone_model(model)
    state = TrainerState(config, model, rng=np.random.default_rng([config.seed, 101]))
    state.reference = clone_model(model)
    if config.pose_mode == "learned":
        state.pose = PoseNet(seed=config.seed)
    if "contrastive" in config.methods:
        state.heads = SimSiamHeads(model.widths[-1], config.seed)
    state.optimizer = Adam(state.trainable(), lr=config.lr)
    return state


# -- per-step pieces -------------------------------------------------------------

@dataclass
class StepViews:
    I_t: np.ndarray          # (B,3,H,W) benign target views
    I_s: np.ndarray          # (B,3,H,W) source views
    I_adv: np.ndarray        # (B,3,H,W) perturbed target views
    R: np.ndarray            # (B,3,3) target -> source
    t: np.ndarray            # (B,3)


def prepare_views(state: TrainerState, scenes: Sequence[SceneSample], asset: Optional[ObjectAsset]) -> StepViews:
    """Place the board, run the inner attack against the frozen model, composite all views."""
    cfg = state.config
    B = len(scenes)
    R = np.stack([s.T_t2s.R for s in scenes]).astype(np.float32)
    t = np.stack([s.T_t2s.t for s in scenes]).astype(np.float32)
    if asset is None or not cfg.synthesis:
        I_t = np.stack([s.I0_t for s in scenes])
        I_s = np.stack([s.I0_s for s in scenes])
        return StepViews(I_t, I_s, I_t, R, t)

    sampler = cfg.sampler
    plans = [try_plan(asset, sc, sampler.draw(state.step * B + b, asset), cfg.lighting)
             for b, sc in enumerate(scenes)]
    if cfg.perturbation != "none" and all(p is None for p in plans):
        raise TrainingError("attack failed on every batch element: no board visible")

    adv_image = asset.image
    if cfg.perturbation != "none" and cfg.inner_steps > 0:
        acfg = cfg.attack_config()
        acfg.seed = cfg.seed * 1_000_003 + state.step
        adv = optimize(state.model, asset, lambda: plans, acfg, steps=cfg.inner_steps,
                       carry=state.carry if cfg.warm_start else None)
        state.carry = adv.carry
        adv_image = adv.image

    I_t, I_s, I_adv = [], [], []
    for p, sc in zip(plans, scenes):
        if p is None:
            I_t.append(sc.I0_t), I_s.append(sc.I0_s), I_adv.append(sc.I0_t)
            continue
        benign = p.target_image()
        I_t.append(benign)
        I_s.append(p.source_image())
        I_adv.append(p.target_image(adv_image) if adv_image is not asset.image else benign)
    return StepViews(np.stack(I_t), np.stack(I_s), np.stack(I_adv), R, t)


def selfsup_loss(state: TrainerState, views: StepViews, depth: Optional[Tensor] = None) -> Tensor:
    """Photometric error of the source view warped by depth predicted on the perturbed view."""
    D = depth if depth is not None else state.model(Tensor(views.I_adv))
    if state.config.pose_mode == "learned":
        if state.pose is None:
            raise TrainingError("learned pose mode needs a pose network")
        R, t = pose_vector_to_rt(state.pose(Tensor(views.I_s), Tensor(views.I_t)))
    else:
        R, t = views.R, views.t
    grid, valid = warp_grid(D, R, t, state.K)
    recon, mask = reconstruct_view(Tensor(views.I_s), grid, valid)
    return photometric_error(Tensor(views.I_t), recon, mask)


def sup_pseudo_loss(state: TrainerState, views: StepViews, depth: Optional[Tensor] = None) -> Tensor:
    if state.reference is None:
        raise TrainingError("pseudo-label supervision needs a frozen reference model")
    with ad.no_grad():
        pseudo = state.reference(Tensor(views.I_t)).data
    D = depth if depth is not None else state.model(Tensor(views.I_adv))
    return masked_mse(D, pseudo)


def color_jitter(images: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Per-image brightness, contrast and saturation jitter."""
    B = images.shape[0]
    b = rng.uniform(1 - strength, 1 + strength, (B, 1, 1, 1))
    c = rng.uniform(1 - strength, 1 + strength, (B, 1, 1, 1))
    s = rng.uniform(1 - strength, 1 + strength, (B, 1, 1, 1))
    x = images * b
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    x = (x - mean) * c + mean
    gray = x.mean(axis=1, keepdims=True)
    x = (x - gray) * s + gray
    return np.clip(x, 0, 1).astype(np.float32)


def contrastive_loss(state: TrainerState, views: StepViews) -> Tensor:
    """Symmetric SimSiam loss between jittered benign and perturbed views."""
    if state.heads is None:
        raise TrainingError("contrastive training needs projection/prediction heads")
    a = color_jitter(views.I_t, state.rng, state.config.jitter)
    b = color_jitter(views.I_adv, state.rng, state.config.jitter)
    z1 = state.heads.project(state.model.embedding(Tensor(a)))
    z2 = state.heads.project(state.model.embedding(Tensor(b)))
    p1, p2 = state.heads.predict(z1), state.heads.predict(z2)
    return negative_cosine(p1, z2.detach()) * 0.5 + negative_cosine(p2, z1.detach()) * 0.5


def train_step(state: TrainerState, scenes: Sequence[SceneSample], asset: Optional[ObjectAsset]) -> LossBreakdown:
    """One alternation: attack with frozen weights, then one model update with the perturbation fixed."""
    cfg = state.config
    if not scenes:
        raise TrainingError("empty batch")
    state.K = scenes[0].K
    views = prepare_views(state, scenes, asset)
    out = LossBreakdown()
    terms = []
    depth = None
    if "selfsup" in cfg.methods or "sup-pseudo" in cfg.methods:
        depth = state.model(Tensor(views.I_adv))
    if "selfsup" in cfg.methods:
        l = selfsup_loss(state, views, depth)
        out.l_p = l.item()
        terms.append(l)
    if "sup-pseudo" in cfg.methods:
        l = sup_pseudo_loss(state, views, depth)
        out.l_sup = l.item()
        terms.append(l)
    if "contrastive" in cfg.methods:
        l = contrastive_loss(state, views)
        out.l_con = l.item()
        terms.append(l)
    total = terms[0]
    for l in terms[1:]:
        total = total + l
    out.total = total.item()
    if not np.isfinite(out.total):
        raise FloatingPointError(f"non-finite training loss at step {state.step}")
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step += 1
    return out


def train_step_selfsup(state: TrainerState, scenes, asset) -> LossBreakdown:
    if "selfsup" not in state.config.methods:
        raise TrainingError("state is not configured for self-supervised training")
    return train_step(state, scenes, asset)


def train_step_sup_pseudo(state: TrainerState, scenes, asset) -> LossBreakdown:
    if state.reference is None:
        raise TrainingError("pseudo-label supervision needs a frozen reference model")
    return train_step(state, scenes, asset)


def train_step_contrastive(state: TrainerState, scenes, asset) -> LossBreakdown:
    return train_step(state, scenes, asset)


# -- driver ------------------------------------------------------------------------

def run_training(config: TrainConfig, scenes: Sequence[SceneSample], asset: Optional[ObjectAsset],
                 model: Optional[DepthNet] = None, eval_scenes: Optional[Sequence[SceneSample]] = None,
                 out_dir=None, progress=None) -> tuple[TrainerState, list[list]]:
    """Run ``config.steps`` steps; writes ``train_log.csv`` and checkpoints under ``out_dir``."""
    if not scenes:
        raise TrainingError("training dataset is empty")
    state = make_state(config, model)
    out = Path(out_dir) if out_dir is not None else None
    held_out = list(eval_scenes or [])[: config.eval_scenes]
    order_rng = np.random.default_rng([config.seed, 5])
    rows: list[list] = []
    for _ in range(config.steps):
        idx = order_rng.integers(0, len(scenes), config.batch_size)
        br = train_step(state, [scenes[i] for i in idx], asset)
        abse = ""
        if held_out and config.eval_every and state.step % config.eval_every == 0:
            abse = benign_eval(state.model, held_out).abse
        rows.append(br.row(state.step, abse))
        if progress is not None:
            progress(state.step, br)
        if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state.model, out / "checkpoints" / f"step_{state.step:06d}", state.step)
    if out is not None:
        dio.write_csv(out / "train_log.csv", LOG_COLUMNS, rows)
        save_checkpoint(state.model, out / "checkpoint", state.step, {"train_config": config.to_dict()})
    return state, rows
