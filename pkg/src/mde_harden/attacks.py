"""Adversarial object generation: sparse soft-L0, L-inf/L2 PGD and centre patches.

Every attack optimises one object image over an expectation of scenes and
board placements. The loss drives the predicted inverse depth inside the
object region towards zero, i.e. pushes the object away from the camera.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import io as dio
from .assets import ObjectAsset
from .autodiff import Tensor
from .geometry import BoardPlacement
from .nn import Adam, Module, set_data
from .scenes import SceneSample
from .synthesis import PlacementSampler, SynthesisPlan, try_plan

NORMS = ("L0", "Linf", "L2", "patch")
PERTURBED_THRESHOLD = 0.01


class AttackError(ValueError):
    pass


@dataclass
class PerturbationVars:
    b_p: Tensor
    b_n: Tensor
    maxp: float = 1.0
    gamma: float = 0.05

    def __post_init__(self):
        self.b_p = ad.as_tensor(self.b_p)
        self.b_n = ad.as_tensor(self.b_n)
        if self.b_p.shape != self.b_n.shape:
            raise ValueError("b_p and b_n must share a shape")
        if not (np.all(np.isfinite(self.b_p.data)) and np.all(np.isfinite(self.b_n.data))):
            raise ValueError("perturbation variables must be finite")
        if not (self.maxp > 0 and self.gamma > 0):
            raise ValueError("maxp and gamma must be positive")

    @classmethod
    def init(cls, shape, value: float = 0.0, maxp: float = 1.0, gamma: float = 0.05) -> "PerturbationVars":
        return cls(Tensor(np.full(shape, value), requires_grad=True),
                   Tensor(np.full(shape, value), requires_grad=True), maxp, gamma)

    def parameters(self) -> list[Tensor]:
        return [self.b_p, self.b_n]


def soft_l0_delta(v: PerturbationVars) -> Tensor:
    return (ad.clip(v.b_p, 0.0, 1.0) - ad.clip(v.b_n, 0.0, 1.0)) * v.maxp


def l_pixel(v: PerturbationVars) -> Tensor:
    """Smooth count of active pixels: per pixel, the channel max of ``(tanh(b/gamma)+1)/2``."""
    def term(b):
        s = (ad.tanh(b / v.gamma) + 1.0) * 0.5
        return ad.reduce_sum(ad.reduce_max(s, axis=0)) if s.ndim == 3 else ad.reduce_sum(s)
    return term(v.b_p) + term(v.b_n)


@dataclass
class AttackConfig:
    norm: str = "L0"
    eps: float = 0.1
    steps: Optional[int] = None
    step_size: Optional[float] = None
    eot_batch: int = 12
    sampler: PlacementSampler = field(default_factory=lambda: PlacementSampler((5.0, 30.0), 30.0, 0))
    seed: int = 0
    maxp: float = 1.0
    gamma: float = 0.05
    sparsity_weight: float = 1e-3
    init_value: float = 0.01
    region: str = "mask"
    lighting: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise AttackError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.eps < 0 or (self.eps == 0 and self.norm == "patch"):
            raise AttackError(f"invalid budget eps={self.eps} for {self.norm}")
        if self.steps is not None and self.steps < 0:
            raise AttackError("steps must be >= 0")
        if self.eot_batch < 1:
            raise AttackError("eot_batch must be >= 1")
        if self.region not in ("mask", "image"):
            raise AttackError(f"unknown region {self.region!r}")

    @property
    def budget(self) -> float:
        """Budget on the [0,1] pixel scale; L2 budgets are given on the 0-255 scale."""
        return self.eps / 255.0 if self.norm == "L2" else self.eps

    @property
    def resolved_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return 10 if self.norm in ("Linf", "L2") else 1000

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.norm in ("Linf", "L2"):
            return 2.5 * self.budget / 10
        # below ~0.02 the sparsity term wins before the attack gradient builds up
        return 0.05 if self.norm == "L0" else 0.01

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = {"distance": list(self.sampler.distance), "angle_deg": self.sampler.angle_deg,
                        "seed": self.sampler.seed}
        d["steps"], d["step_size"] = self.resolved_steps, self.resolved_step_size
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        s = d.pop("sampler", None)
        if s is not None:
            d["sampler"] = PlacementSampler(tuple(s["distance"]), s["angle_deg"], s["seed"])
        return cls(**d)


@dataclass
class AdversarialObject:
    image: np.ndarray
    delta: np.ndarray
    report: dict
    config: Optional[AttackConfig] = None
    carry: Any = field(default=None, repr=False, compare=False)   # optimiser variables, for warm starts

    def as_asset(self, asset: ObjectAsset) -> ObjectAsset:
        return ObjectAsset(self.image, asset.mask, asset.W, asset.H, name=asset.name + "-adv")

    def save(self, path_png):
        p = Path(path_png)
        dio.write_png(p, self.image)
        dio.write_tensor_container(p.with_suffix(".dht"), {"image": self.image, "delta": self.delta})
        side = {"report": self.report, "config": self.config.to_dict() if self.config else None}
        dio.write_json(p.with_suffix(".json"), side)

    @classmethod
    def load(cls, path_png) -> "AdversarialObject":
        p = Path(path_png)
        if not p.with_suffix(".dht").exists():
            raise FileNotFoundError(f"adversarial object tensors missing: {p.with_suffix('.dht')}")
        t = dio.read_tensor_container(p.with_suffix(".dht"))
        side = dio.read_json(p.with_suffix(".json"))
        cfg = AttackConfig.from_dict(side["config"]) if side.get("config") else None
        return cls(t["image"], t["delta"], side["report"], cfg)


def budget_report(delta: np.ndarray, mask: np.ndarray, norm: str = "", eps: float = 0.0) -> dict:
    mag = np.abs(delta).max(axis=0)
    area = max(int(mask.sum()), 1)
    count = int((mag > PERTURBED_THRESHOLD).sum())
    return {"norm": norm, "eps": float(eps), "perturbed_pixels": count, "l0_fraction": count / area,
            "linf": float(np.abs(delta).max()) if delta.size else 0.0,
            "l2": float(np.sqrt(np.sum(delta.astype(np.float64) ** 2)))}


def _finish(asset: ObjectAsset, delta: np.ndarray, config: AttackConfig) -> AdversarialObject:
    """Clip to the valid pixel range and report budgets exactly (in float64).

    Budgets are re-imposed in float64 and the float32 result is rounded
    towards the benign image, so float32 rounding never overshoots them.
    """
    img = asset.image.astype(np.float64)
    eff = np.clip(img + np.asarray(delta, dtype=np.float64), 0, 1) - img
    if config.norm == "Linf":
        eff = np.clip(eff, -config.budget, config.budget)
    elif config.norm == "L2":
        n = float(np.sqrt(np.sum(eff ** 2)))
        if n > config.budget:
            eff *= config.budget / n
    adv = (img + eff).astype(np.float32)
    grew = np.abs(adv.astype(np.float64) - img) > np.abs(eff)
    adv = np.where(grew, np.nextafter(adv, asset.image), adv).astype(np.float32)
    eff64 = adv.astype(np.float64) - img
    report = budget_report(eff64, asset.mask, config.norm, config.eps)
    return AdversarialObject(adv, eff64.astype(np.float32), report, config)


# -- objective -------------------------------------------------------------------

def build_plans(asset: ObjectAsset, scenes: Sequence[SceneSample], placements: Sequence[BoardPlacement],
                lighting: bool = True) -> list[Optional[SynthesisPlan]]:
    """One plan per (scene, placement); ``None`` where the board is not visible."""
    return [try_plan(asset, sc, pl, lighting) for sc, pl in zip(scenes, placements)]


def inverse_depth_mse(model: Module, plans: Sequence[Optional[SynthesisPlan]], image: Tensor,
                      region: str = "mask") -> Tensor:
    """Mean over usable plans of mean((1/D)^2) over the object (or whole) region."""
    usable = [p for p in plans if p is not None and p.target.area > 0]
    if not usable:
        raise AttackError("no batch element shows the object")
    views = ad.stack([p.render_target(image) for p in usable], axis=0)
    inv = ad.reciprocal(model(views))                                       # B,1,H,W
    if region == "image":
        return ad.reduce_mean(ad.square(inv))
    m = np.stack([p.target.mask for p in usable])[:, None].astype(np.float32)
    per = ad.reduce_sum(ad.square(inv) * m, axis=(1, 2, 3)) / m.sum(axis=(1, 2, 3))
    return ad.reduce_mean(per)


def adversarial_objective(model: Module, asset: ObjectAsset, scenes: Sequence[SceneSample],
                          placements: Sequence[BoardPlacement], v: PerturbationVars,
                          pixel_weight: float = 1.0, lighting: bool = True, region: str = "mask") -> Tensor:
    """Inverse-depth MSE of the perturbed object averaged over the batch, plus the sparsity term."""
    plans = build_plans(asset, scenes, placements, lighting)
    image = _perturbed_image(asset, v)
    return inverse_depth_mse(model, plans, image, region) + l_pixel(v) * pixel_weight


def _perturbed_image(asset: ObjectAsset, v: PerturbationVars) -> Tensor:
    delta = soft_l0_delta(v) * asset.mask.astype(np.float32)
    return ad.clip(delta + asset.image, 0.0, 1.0)


class _EoT:
    """Deterministic stream of (scene, placement) batches."""

    def __init__(self, asset: ObjectAsset, scenes: Sequence[SceneSample], config: AttackConfig):
        if not scenes:
            raise AttackError("attack needs at least one scene")
        self.asset, self.scenes, self.config = asset, list(scenes), config
        self.rng = np.random.default_rng([config.seed, 7])
        self.draw = 0

    def batch(self) -> list[Optional[SynthesisPlan]]:
        c = self.config
        for _ in range(100):
            idx = self.rng.integers(0, len(self.scenes), c.eot_batch)
            pls = []
            for i in idx:
                pls.append(c.sampler.draw(self.draw, self.asset))
                self.draw += 1
            plans = build_plans(self.asset, [self.scenes[i] for i in idx], pls, c.lighting)
            if any(p is not None for p in plans):
                return plans
        raise AttackError("no placement draw shows the object")


# -- attacks -------------------------------------------------------------------------

def _top_k_project(delta: np.ndarray, mask: np.ndarray, eps: float) -> np.ndarray:
    mag = np.abs(delta).max(axis=0) * mask
    k = int(math.floor(eps * mask.sum() + 1e-9))
    if int((mag > PERTURBED_THRESHOLD).sum()) <= k:
        return delta
    keep = np.zeros(mag.size, dtype=bool)
    if k > 0:
        order = np.argsort(-mag.ravel(), kind="stable")
        keep[order[:k]] = True
    return delta * keep.reshape(mag.shape)[None]


def optimize_l0(model: Module, asset: ObjectAsset, next_batch: Callable[[], list], config: AttackConfig,
                steps: Optional[int] = None, carry: Optional[PerturbationVars] = None) -> AdversarialObject:
    """Soft-L0 optimisation over batches from ``next_batch`` followed by the top-k projection.

    ``carry`` resumes from the variables of an earlier call instead of a fresh start.
    """
    steps = config.resolved_steps if steps is None else steps
    if steps == 0 or config.eps == 0:
        return _finish(asset, np.zeros_like(asset.image), config)
    v = carry if carry is not None else PerturbationVars.init(asset.image.shape, config.init_value,
                                                               config.maxp, config.gamma)
    opt = Adam(v.parameters(), lr=config.resolved_step_size)
    weight = None
    with model.frozen():
        for _ in range(steps):
            batch = next_batch()
            if weight is None:
                # the sparsity weight is relative to the benign objective, which
                # keeps the balance of the two terms independent of the model
                with ad.no_grad():
                    base = inverse_depth_mse(model, batch, Tensor(asset.image), config.region).item()
                weight = config.sparsity_weight * base
            loss = inverse_depth_mse(model, batch, _perturbed_image(asset, v), config.region)
            loss = loss + l_pixel(v) * weight
            opt.zero_grad()
            loss.backward()
            opt.step()
    with ad.no_grad():
        delta = (soft_l0_delta(v).data * asset.mask).astype(np.float32)
    adv = _finish(asset, _top_k_project(delta, asset.mask, config.eps), config)
    adv.carry = v
    return adv


def gen_l0_attack(model: Module, asset: ObjectAsset, scenes: Sequence[SceneSample],
                  config: AttackConfig) -> AdversarialObject:
    if config.norm != "L0":
        raise AttackError(f"gen_l0_attack needs norm L0, got {config.norm}")
    return optimize_l0(model, asset, _EoT(asset, scenes, config).batch, config)


def _project_ball(delta: np.ndarray, norm: str, budget: float) -> np.ndarray:
    if norm == "Linf":
        return np.clip(delta, -budget, budget)
    n = float(np.sqrt(np.sum(delta.astype(np.float64) ** 2)))
    return delta if n <= budget or n == 0 else (delta * (budget / n)).astype(delta.dtype)


def optimize_pgd(model: Module, asset: ObjectAsset, next_batch: Callable[[], list], config: AttackConfig,
                 steps: Optional[int] = None, carry: Optional[np.ndarray] = None) -> AdversarialObject:
    """PGD from a random start inside the ball, or from the delta in ``carry``."""
    budget, alpha = config.budget, config.resolved_step_size
    steps = config.resolved_steps if steps is None else steps
    if budget == 0:
        return _finish(asset, np.zeros_like(asset.image), config)
    mask = asset.mask.astype(np.float32)
    rng = np.random.default_rng([config.seed, 11])
    if carry is not None:
        delta = _project_ball(np.asarray(carry, dtype=np.float64), config.norm, budget)
    elif config.norm == "Linf":
        delta = rng.uniform(-budget, budget, asset.image.shape)
    else:
        d = rng.standard_normal(asset.image.shape)
        delta = d / max(np.linalg.norm(d), 1e-12) * budget * rng.uniform() ** (1.0 / d.size)
    delta = (delta * mask).astype(np.float32)
    delta = np.clip(asset.image + delta, 0, 1) - asset.image
    with model.frozen():
        for _ in range(steps):
            x = Tensor(asset.image + delta, requires_grad=True)
            inverse_depth_mse(model, next_batch(), x, config.region).backward()
            g = x.grad * mask
            if config.norm == "Linf":
                step = np.sign(g)
            else:
                step = g / max(float(np.linalg.norm(g)), 1e-12)
            delta = _project_ball(delta - alpha * step, config.norm, budget)
            delta = (np.clip(asset.image + delta, 0, 1) - asset.image).astype(np.float32)
    adv = _finish(asset, delta, config)
    adv.carry = delta
    return adv


def gen_pgd_attack(model: Module, asset: ObjectAsset, scenes: Sequence[SceneSample],
                   config: AttackConfig) -> AdversarialObject:
    if config.norm not in ("Linf", "L2"):
        raise AttackError(f"gen_pgd_attack needs norm Linf or L2, got {config.norm}")
    return optimize_pgd(model, asset, _EoT(asset, scenes, config).batch, config)


def patch_square(asset: ObjectAsset, eps: float) -> tuple[slice, slice]:
    side = int(round(math.sqrt(eps * asset.mask.sum())))
    if side == 0:
        raise AttackError("patch side rounds to 0 pixels")
    if side > min(asset.h, asset.w):
        raise AttackError(f"patch side {side} exceeds the object size")
    r0, c0 = (asset.h - side) // 2, (asset.w - side) // 2
    return slice(r0, r0 + side), slice(c0, c0 + side)


def optimize_patch(model: Module, asset: ObjectAsset, next_batch: Callable[[], list], config: AttackConfig,
                   steps: Optional[int] = None, carry: Optional[np.ndarray] = None) -> AdversarialObject:
    rows, cols = patch_square(asset, config.eps)
    support = np.zeros(asset.image.shape[1:], dtype=np.float32)
    support[rows, cols] = 1.0
    start = asset.image[:, rows, cols] if carry is None else np.asarray(carry, dtype=np.float32)
    patch = Tensor(start, requires_grad=True)
    steps = config.resolved_steps if steps is None else steps
    if steps:
        opt = Adam([patch], lr=config.resolved_step_size)
        base = asset.image * (1 - support)
        # selection matrices place the patch into the full image: E_r @ patch @ E_c^T
        E_r = np.eye(asset.h, dtype=np.float32)[:, rows]
        E_c = np.eye(asset.w, dtype=np.float32)[:, cols]
        with model.frozen():
            for _ in range(steps):
                full = E_r @ patch @ E_c.T + base
                loss = inverse_depth_mse(model, next_batch(), full, config.region)
                opt.zero_grad()
                loss.backward()
                opt.step()
                set_data(patch, np.clip(patch.data, 0, 1))
    delta = np.zeros_like(asset.image)
    delta[:, rows, cols] = patch.data - asset.image[:, rows, cols]
    adv = _finish(asset, delta, config)
    adv.carry = patch.data.copy()
    return adv


def gen_patch_attack(model: Module, asset: ObjectAsset, scenes: Sequence[SceneSample],
                     config: AttackConfig) -> AdversarialObject:
    if config.norm != "patch":
        raise AttackError(f"gen_patch_attack needs norm patch, got {config.norm}")
    return optimize_patch(model, asset, _EoT(asset, scenes, config).batch, config)


def generate_attack(model: Module, asset: ObjectAsset, scenes: Sequence[SceneSample],
                    config: AttackConfig) -> AdversarialObject:
    if config.norm == "L0":
        return gen_l0_attack(model, asset, scenes, config)
    if config.norm == "patch":
        return gen_patch_attack(model, asset, scenes, config)
    return gen_pgd_attack(model, asset, scenes, config)


def optimize(model: Module, asset: ObjectAsset, next_batch: Callable[[], list], config: AttackConfig,
             steps: Optional[int] = None, carry=None) -> AdversarialObject:
    """Run the attack named by ``config.norm`` against batches from ``next_batch``."""
    fn = {"L0": optimize_l0, "patch": optimize_patch}.get(config.norm, optimize_pgd)
    return fn(model, asset, next_batch, config, steps, carry)
