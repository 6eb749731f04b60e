"""Depth metrics, attack evaluation, benign evaluation and transfer matrices."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import io as dio
from .assets import ObjectAsset
from .attacks import AdversarialObject, AttackConfig, generate_attack
from .nn import Module
from .parallel import ordered_map
from .scenes import SceneSample
from .synthesis import PlacementSampler, SynthesisPlan, try_plan

DELTA_THRESHOLD = 1.25
METRICS = ("abse", "rmse", "absr", "sqr", "delta")


class EvaluationError(ValueError):
    pass


@dataclass
class MetricReport:
    abse: float
    rmse: float
    absr: float
    sqr: float
    delta: float
    count: int
    samples: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> list:
        return [self.abse, self.rmse, self.absr, self.sqr, self.delta, self.count, self.samples]


def depth_metrics(X, Y, mask=None) -> MetricReport:
    """Compare estimate ``X`` with reference ``Y`` over ``mask``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        raise EvaluationError(f"shape mismatch: {X.shape} vs {Y.shape}")
    m = np.ones(X.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    x, y = X[m], Y[m]
    if x.size == 0:
        raise EvaluationError("empty evaluation mask")
    if np.any(y <= 0):
        raise EvaluationError("reference depth must be positive on the mask")
    d = x - y
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(x / y, y / x)
    ok = (x > 0) & (ratio < DELTA_THRESHOLD)
    return MetricReport(
        abse=float(np.mean(np.abs(d))),
        rmse=float(np.sqrt(np.mean(d * d))),
        absr=float(np.mean(np.abs(d) / y)),
        sqr=float(np.mean(d * d / y)),
        delta=float(np.mean(ok)),
        count=int(x.size),
    )


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Equal-weight mean over samples; counts add up."""
    if not reports:
        raise EvaluationError("zero usable samples")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRICS}
    return MetricReport(**vals, count=sum(r.count for r in reports),
                        samples=sum(r.samples for r in reports))


def predict_depth(model: Module, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """(N,3,H,W) -> (N,H,W) depth without recording a graph."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            out.append(model(ad.Tensor(images[i:i + batch])).data[:, 0])
    return np.concatenate(out, axis=0).astype(np.float64)


@dataclass
class EvalProtocol:
    scenes: int = 100
    distance: tuple = (5.0, 30.0)
    angle_deg: float = 30.0
    seed: int = 1234
    lighting: bool = True

    def __post_init__(self):
        if self.scenes < 1:
            raise EvaluationError("protocol needs at least one scene")

    @property
    def sampler(self) -> PlacementSampler:
        return PlacementSampler(tuple(self.distance), self.angle_deg, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distance"] = list(self.distance)
        return d


def protocol_plans(asset: ObjectAsset, scenes: Sequence[SceneSample], protocol: EvalProtocol) -> list[SynthesisPlan]:
    """The protocol's (scene, placement) draws; invisible boards are dropped."""
    if not scenes:
        raise EvaluationError("evaluation needs at least one scene")
    rng = np.random.default_rng([protocol.seed, 3])
    n = len(scenes)
    order = rng.permutation(n) if protocol.scenes <= n else rng.integers(0, n, protocol.scenes)
    sampler = protocol.sampler

    def build(k):
        return try_plan(asset, scenes[order[k]], sampler.draw(k, asset), protocol.lighting)

    plans = ordered_map(build, range(protocol.scenes))
    return [p for p in plans if p is not None]


def evaluate_object(model: Module, asset: ObjectAsset, adv_image: np.ndarray,
                    scenes: Sequence[SceneSample], protocol: EvalProtocol) -> MetricReport:
    """Adversarial vs benign prediction over the object region, averaged over protocol draws."""
    plans = protocol_plans(asset, scenes, protocol)
    if not plans:
        raise EvaluationError("zero usable samples")
    adv_image = adv_image.image if isinstance(adv_image, AdversarialObject) else np.asarray(adv_image)
    benign = np.stack([p.target_image() for p in plans])
    adv = np.stack([p.target_image(adv_image) for p in plans])
    Y = predict_depth(model, benign)
    X = predict_depth(model, adv)
    return aggregate([depth_metrics(X[i], Y[i], p.target.mask) for i, p in enumerate(plans)])


def evaluate_attack(model: Module, asset: ObjectAsset, config: AttackConfig, protocol: EvalProtocol,
                    eval_scenes: Sequence[SceneSample], attack_scenes: Optional[Sequence[SceneSample]] = None):
    """White-box: generate against ``model`` then evaluate; returns ``(report, adversarial object)``."""
    adv = generate_attack(model, asset, attack_scenes if attack_scenes is not None else eval_scenes, config)
    return evaluate_object(model, asset, adv, eval_scenes, protocol), adv


def benign_eval(model: Module, scenes: Sequence[SceneSample]) -> MetricReport:
    """Prediction vs ground-truth depth over every valid pixel, averaged over scenes."""
    if not scenes:
        raise EvaluationError("benign evaluation needs at least one scene")
    for s in scenes:
        if s.depth is None:
            raise EvaluationError(f"scene {s.name or '?'} has no ground-truth depth")
    X = predict_depth(model, np.stack([s.I0_t for s in scenes]))
    reports = []
    for i, s in enumerate(scenes):
        gt = np.asarray(s.depth, dtype=np.float64)
        reports.append(depth_metrics(X[i], gt, np.isfinite(gt) & (gt > 0)))
    return aggregate(reports)


@dataclass
class TransferMatrix:
    names: list
    cells: dict = field(default_factory=dict)      # (source, target) -> MetricReport

    def get(self, src: str, dst: str) -> Optional[MetricReport]:
        return self.cells.get((src, dst))

    def csv_rows(self, metric: str = "abse"):
        header = ["source"] + list(self.names)
        rows = []
        for s in self.names:
            rows.append([s] + ["" if s == t else getattr(self.cells[(s, t)], metric) for t in self.names])
        return header, rows

    def write_csv(self, path, metric: str = "abse"):
        header, rows = self.csv_rows(metric)
        dio.write_csv(path, header, rows)


def transfer_matrix(models: Mapping[str, Module], asset: ObjectAsset, config: AttackConfig,
                    protocol: EvalProtocol, eval_scenes: Sequence[SceneSample],
                    attack_scenes: Optional[Sequence[SceneSample]] = None,
                    objects: Optional[Mapping[str, AdversarialObject]] = None) -> TransferMatrix:
    """Objects generated against each source model, evaluated on every other model."""
    if len(models) < 2:
        raise EvaluationError("a transfer matrix needs at least two models")
    names = list(models)
    objects = dict(objects or {})
    for n in names:
        if n not in objects:
            objects[n] = generate_attack(models[n], asset,
                                         attack_scenes if attack_scenes is not None else eval_scenes, config)
    tm = TransferMatrix(names)
    for s in names:
        for t in names:
            if s != t:
                tm.cells[(s, t)] = evaluate_object(models[t], asset, objects[s], eval_scenes, protocol)
    return tm
