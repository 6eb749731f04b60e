"""``mde-harden`` command line.

Every command resolves its configuration (defaults, ``--config`` file,
``--set`` overrides, ``--seed``), writes the resolved copy to
``OUT/config.ini``, does its work, and finishes with ``OUT/summary.json``.
Failures print one JSON line on stderr and exit with 2 (configuration),
3 (I/O) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import io as dio
from .assets import ObjectAsset, load_asset, make_car_asset
from .attacks import AdversarialObject, AttackConfig, AttackError, generate_attack
from .config import ConfigError, RunConfig, load_config
from .evaluation import (METRICS, EvalProtocol, EvaluationError, MetricReport, benign_eval,
                         evaluate_object, transfer_matrix)
from .geometry import BoardPlacement, GeometryError
from .io import ContainerError
from .models import CheckpointError, DepthNet, load_checkpoint
from .parallel import thread_count
from .scenes import (SyntheticSceneSpec, generate_dataset, generate_scenes, load_dataset,
                     split_by_parity)
from .synthesis import PlacementSampler, SynthesisPlan
from .training import TrainConfig, TrainingError, run_training
from .validation import SchemaError, validate_json

COMMANDS = ("synth", "attack", "train", "eval", "transfer", "gen-data", "ablate", "report")
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
METRIC_COLUMNS = ["model", "condition", *METRICS, "count", "samples"]
ABLATION_COLUMNS = ["sweep", "setting", "distance_min", "distance_max", "angle_deg",
                    "benign_abse", "attack_abse", "attack_rmse", "attack_delta"]


class Run:
    """Resolved config plus the output directory and the files written so far."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.outputs: list[str] = []

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        self.outputs.append(str(p.relative_to(self.out)))
        return p


# -- resolving inputs -----------------------------------------------------------------

def _scene_spec(cfg: RunConfig) -> SyntheticSceneSpec:
    d = cfg["data"]
    return SyntheticSceneSpec(width=d["width"], height=d["height"], baseline=d["baseline"], n_quads=d["n_quads"])


_SCENE_CACHE: dict = {}


def scenes(cfg: RunConfig, split: str):
    """Scenes of ``split`` ("train" or "eval") from ``data.root`` or generated in memory."""
    d = cfg["data"]
    if d["root"]:
        return load_dataset(d["root"], split)
    key = (d["count"], d["seed"], d["width"], d["height"], d["baseline"], d["n_quads"])
    if key not in _SCENE_CACHE:
        if d["count"] < 2:
            raise ConfigError("data.count must be >= 2 so both splits are non-empty")
        _SCENE_CACHE.clear()
        _SCENE_CACHE[key] = split_by_parity(generate_scenes(_scene_spec(cfg), d["count"], d["seed"]))
    train, held = _SCENE_CACHE[key]
    return list(train if split == "train" else held)


def asset(cfg: RunConfig) -> ObjectAsset:
    a = cfg["asset"]
    return load_asset(a["path"], a["width_m"]) if a["path"] else make_car_asset(W=a["width_m"])


def model_from(path: str) -> DepthNet:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {p}")
    net, _ = load_checkpoint(p)
    if not isinstance(net, DepthNet):
        raise CheckpointError(f"checkpoint {p} is not a depth network")
    return net


def model(cfg: RunConfig) -> DepthNet:
    if not cfg["model"]["checkpoint"]:
        raise ConfigError("model.checkpoint is required for this command")
    return model_from(cfg["model"]["checkpoint"])


def attack_config(cfg: RunConfig) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(norm=a["norm"], eps=a["eps"], steps=a["steps"], step_size=a["step_size"],
                        eot_batch=a["eot_batch"], sampler=PlacementSampler(a["distance"], a["angle_deg"], cfg.seed),
                        seed=cfg.seed, sparsity_weight=a["sparsity_weight"], lighting=a["lighting"],
                        region=a["region"])


def protocol(cfg: RunConfig) -> EvalProtocol:
    e = cfg["eval"]
    return EvalProtocol(scenes=e["scenes"], distance=e["distance"], angle_deg=e["angle_deg"],
                        seed=e["seed"], lighting=e["lighting"])


def train_config(cfg: RunConfig, **changes) -> TrainConfig:
    t = dict(cfg["train"])
    t.update(changes)
    return TrainConfig(methods=tuple(t["methods"]), perturbation=t["perturbation"], eps=t["eps"],
                       inner_steps=t["inner_steps"], attack_lr=t["attack_lr"], warm_start=t["warm_start"],
                       sparsity_weight=t["sparsity_weight"], lr=t["lr"], batch_size=t["batch_size"],
                       steps=t["steps"], pose_mode=t["pose_mode"], distance=tuple(t["distance"]),
                       angle_deg=t["angle_deg"], seed=cfg.seed, mode=t["mode"], lighting=t["lighting"],
                       synthesis=t["synthesis"], jitter=t["jitter"], eval_every=t["eval_every"],
                       eval_scenes=t["eval_scenes"], checkpoint_every=t["checkpoint_every"],
                       widths=tuple(t["widths"]))


def named_checkpoints(items: list[str]) -> dict[str, str]:
    """``name=path`` (or bare ``path``, named after its directory) entries."""
    out: dict[str, str] = {}
    for it in items:
        name, path = it.split("=", 1) if "=" in it else (Path(it).name, it)
        name = name.strip()
        if name in out:
            raise ConfigError(f"duplicate model name {name!r}")
        out[name] = path.strip()
    return out


def adversarial_image(path: str) -> np.ndarray:
    p = Path(path)
    if p.with_suffix(".dht").exists():
        return AdversarialObject.load(p).image
    if not p.exists():
        raise FileNotFoundError(f"adversarial object not found: {p}")
    return dio.read_png(p)


def _metric_row(name: str, condition: str, r: MetricReport) -> list:
    return [name, condition] + r.row()


def _condition(cfg: RunConfig) -> str:
    a = cfg["attack"]
    return f"{a['norm']}-{a['eps']:g}"


def benign_scenes(cfg: RunConfig):
    return scenes(cfg, "eval")[: cfg["eval"]["benign_scenes"]]


def attack_abse(net: DepthNet, cfg: RunConfig, obj: Optional[np.ndarray] = None):
    """White-box attack against ``net`` (unless ``obj`` is given) evaluated under the protocol."""
    a = asset(cfg)
    adv = obj
    if adv is None:
        adv = generate_attack(net, a, scenes(cfg, "train"), attack_config(cfg))
    return evaluate_object(net, a, adv, scenes(cfg, "eval"), protocol(cfg)), adv


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(run: Run) -> dict:
    d = run.cfg["data"]
    root = run.path("data")
    m = generate_dataset(_scene_spec(run.cfg), d["count"], d["seed"], root)
    validate_json(m, "dataset_manifest", str(root / "manifest.json"))
    return {"scenes": m["count"], "train": sum(e["split"] == "train" for e in m["scenes"])}


def cmd_synth(run: Run) -> dict:
    s = run.cfg["synth"]
    pool = scenes(run.cfg, "train") + scenes(run.cfg, "eval")
    if not 0 <= s["index"] < len(pool):
        raise ConfigError(f"synth.index {s['index']} out of range for {len(pool)} scenes")
    scene = pool[s["index"]]
    a = asset(run.cfg)
    placement = PlacementSampler(s["distance"], s["angle_deg"], run.cfg.seed).draw(s["index"], a)
    if s["z_c"] is not None or s["alpha_deg"] is not None:
        z = placement.z_c if s["z_c"] is None else s["z_c"]
        al = placement.alpha if s["alpha_deg"] is None else math.radians(s["alpha_deg"])
        placement = BoardPlacement(z, al, a.W, a.H, a.w, a.h)
    plan = SynthesisPlan(a, scene, placement, s["lighting"])
    adv = adversarial_image(s["object"]) if s["object"] else None
    if adv is not None and adv.shape != a.image.shape:
        raise ConfigError(f"synth.object has shape {adv.shape}, asset is {a.image.shape}")
    I_t = plan.target_image()
    dio.write_png(run.path("it.png"), I_t)
    dio.write_png(run.path("is.png"), plan.source_image())
    dio.write_png(run.path("it_adv.png"), I_t if adv is None else plan.target_image(adv))
    dio.write_png(run.path("mask_t.png"), plan.target.mask.astype(np.float32)[None].repeat(3, 0))
    dio.write_png(run.path("mask_s.png"), plan.source.mask.astype(np.float32)[None].repeat(3, 0))
    info = {"z_c": placement.z_c, "alpha_deg": placement.alpha_deg, "gain": float(plan.gain),
            "mask_pixels_t": int(plan.target.mask.sum()), "mask_pixels_s": int(plan.source.mask.sum()),
            "scene": scene.name}
    validate_json(info, "placement")
    dio.write_json(run.path("placement.json"), info)
    return info


def cmd_attack(run: Run) -> dict:
    net, a = model(run.cfg), asset(run.cfg)
    adv = generate_attack(net, a, scenes(run.cfg, "train"), attack_config(run.cfg))
    png = run.path("adversarial.png")
    adv.save(png)
    run.outputs += ["adversarial.dht", "adversarial.json"]
    validate_json(dio.read_json(png.with_suffix(".json")), "adversarial_object")
    return dict(adv.report)


def cmd_train(run: Run) -> dict:
    tc = train_config(run.cfg)
    init = None
    if tc.mode == "fine-tune":
        init = model(run.cfg)
    elif run.cfg["model"]["checkpoint"]:
        raise ConfigError("model.checkpoint is set but train.mode is from-scratch")
    state, rows = run_training(tc, scenes(run.cfg, "train"), asset(run.cfg), model=init,
                               eval_scenes=scenes(run.cfg, "eval"), out_dir=run.out)
    run.outputs += ["train_log.csv", "checkpoint/manifest.json", "checkpoint/params.dht"]
    metrics = {"steps": state.step, "benign_abse": benign_eval(state.model, benign_scenes(run.cfg)).abse}
    if rows:
        metrics.update(dict(zip(["l_p", "l_sup", "l_con", "total"], rows[-1][1:5])))
    return metrics


def cmd_eval(run: Run) -> dict:
    net = model(run.cfg)
    name = Path(run.cfg["model"]["checkpoint"]).name
    rep = benign_eval(net, benign_scenes(run.cfg))
    rows = [_metric_row(name, "benign", rep)]
    metrics = {"benign": rep.to_dict()}
    if run.cfg["eval"]["attack"]:
        obj = adversarial_image(run.cfg["attack"]["object"]) if run.cfg["attack"]["object"] else None
        arep, adv = attack_abse(net, run.cfg, obj)
        if isinstance(adv, AdversarialObject):
            adv.save(run.path("adversarial.png"))
            run.outputs += ["adversarial.dht", "adversarial.json"]
        rows.append(_metric_row(name, _condition(run.cfg), arep))
        metrics["attack"] = arep.to_dict()
    dio.write_csv(run.path("report.csv"), METRIC_COLUMNS, rows)
    return metrics


def cmd_transfer(run: Run) -> dict:
    ckpts = named_checkpoints(run.cfg["transfer"]["checkpoints"])
    if len(ckpts) < 2:
        raise ConfigError("transfer.checkpoints needs at least two models")
    models = {n: model_from(p) for n, p in ckpts.items()}
    a = asset(run.cfg)
    tm = transfer_matrix(models, a, attack_config(run.cfg), protocol(run.cfg), scenes(run.cfg, "eval"),
                         attack_scenes=scenes(run.cfg, "train"))
    for m in METRICS:
        tm.write_csv(run.path(f"transfer_{m}.csv"), m)
    cells = {f"{s}->{t}": r.abse for (s, t), r in tm.cells.items()}
    return {"models": list(models), "abse": cells}


def cmd_ablate(run: Run) -> dict:
    base = model(run.cfg)
    ab = run.cfg["ablate"]
    settings = [("distance", f"{lo:g}-{hi:g}", (lo, hi), ab["base_angle"]) for lo, hi in ab["distances"]]
    settings += [("angle", f"{ang:g}", tuple(ab["base_distance"]), ang) for ang in ab["angles"]]
    if not settings:
        raise ConfigError("ablate.distances and ablate.angles are both empty")
    rows = {"distance": [], "angle": []}
    for sweep, label, dist, ang in settings:
        tc = train_config(run.cfg, distance=dist, angle_deg=ang, mode="fine-tune")
        sub = run.out / "runs" / f"{sweep}_{label}"
        state, _ = run_training(tc, scenes(run.cfg, "train"), asset(run.cfg), model=base, out_dir=sub)
        b = benign_eval(state.model, benign_scenes(run.cfg))
        r, _ = attack_abse(state.model, run.cfg)
        rows[sweep].append([sweep, label, dist[0], dist[1], ang, b.abse, r.abse, r.rmse, r.delta])
    metrics = {}
    for sweep, rs in rows.items():
        if rs:
            dio.write_csv(run.path(f"ablation_{sweep}.csv"), ABLATION_COLUMNS, rs)
            metrics[sweep] = {r[1]: {"benign_abse": r[5], "attack_abse": r[6]} for r in rs}
    return metrics


def _parse_expect(e: str):
    for op in (">", "<"):
        if op in e:
            lhs, rhs = (x.strip() for x in e.split(op, 1))
            for side in (lhs, rhs):
                if side.count(".") != 1:
                    raise ConfigError(f"report.expect terms must be model.metric, got {side!r}")
            return lhs, op, rhs
    raise ConfigError(f"report.expect entries need '>' or '<', got {e!r}")


def cmd_report(run: Run) -> dict:
    ckpts = named_checkpoints(run.cfg["report"]["checkpoints"])
    if not ckpts:
        raise ConfigError("report.checkpoints is empty")
    expects = [_parse_expect(e) for e in run.cfg["report"]["expect"]]
    rows, table = [], {}
    for name, path in ckpts.items():
        net = model_from(path)
        b = benign_eval(net, benign_scenes(run.cfg))
        rows.append(_metric_row(name, "benign", b))
        entry = {"benign_abse": b.abse, "attack_abse": None}
        if run.cfg["eval"]["attack"]:
            r, _ = attack_abse(net, run.cfg)
            rows.append(_metric_row(name, _condition(run.cfg), r))
            entry["attack_abse"] = r.abse
        table[name] = entry
    checks = []
    for lhs, op, rhs in expects:
        vals = []
        for side in (lhs, rhs):
            m, metric = side.split(".")
            if m not in table or table[m].get(metric) is None:
                raise ConfigError(f"report.expect refers to unknown value {side!r}")
            vals.append(float(table[m][metric]))
        ok = vals[0] > vals[1] if op == ">" else vals[0] < vals[1]
        checks.append({"expect": f"{lhs} {op} {rhs}", "passed": bool(ok), "lhs": vals[0], "rhs": vals[1]})
        if not ok:
            print(f"report: expectation FAILED: {lhs} {op} {rhs} ({vals[0]:.4f} vs {vals[1]:.4f})",
                  file=sys.stderr)
    dio.write_csv(run.path("report.csv"), METRIC_COLUMNS, rows)
    rep = {"models": table, "checks": checks, "all_passed": all(c["passed"] for c in checks)}
    validate_json(rep, "report")
    dio.write_json(run.path("report.json"), rep)
    return rep


HANDLERS: dict[str, Callable[[Run], dict]] = {
    "gen-data": cmd_gen_data, "synth": cmd_synth, "attack": cmd_attack, "train": cmd_train,
    "eval": cmd_eval, "transfer": cmd_transfer, "ablate": cmd_ablate, "report": cmd_report,
}


# -- entry point ------------------------------------------------------------------------------

def _classify(exc: BaseException) -> Optional[tuple[str, int]]:
    if isinstance(exc, (FloatingPointError, OverflowError)):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, (OSError, ContainerError, CheckpointError, SchemaError)):
        return "io", EXIT_IO
    if isinstance(exc, (ConfigError, AttackError, TrainingError, EvaluationError, GeometryError, ValueError)):
        return "config", EXIT_CONFIG
    return None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mde-harden", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI-style config file with [section] key = value entries")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    p.add_argument("--out", help="output directory (default runs/<command>)")
    return p


def _summary(run: Run, status: str, wall: float, metrics: dict, error: Optional[dict] = None) -> dict:
    s = {"command": run.command, "status": status, "version": __version__, "seed": run.cfg.seed,
         "config": run.cfg.to_dict(), "wall_time": wall, "metrics": metrics, "outputs": run.outputs}
    if error:
        s["error"] = error
    return json.loads(json.dumps(s, default=float))


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    run: Optional[Run] = None
    try:
        thread_count()
        cfg = load_config(args.config, args.set, args.seed)
        run = Run(args.command, cfg, Path(args.out or Path("runs") / args.command))
        run.out.mkdir(parents=True, exist_ok=True)
        cfg.write(run.path("config.ini"))
        metrics = HANDLERS[args.command](run)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        cls = _classify(exc)
        if cls is None:
            raise
        kind, code = cls
        err = {"kind": kind, "message": str(exc), "exit_code": code}
        print(json.dumps({"error": err}), file=sys.stderr)
        if run is not None and run.out.is_dir():
            try:
                dio.write_json(run.out / "summary.json", _summary(run, "error", time.perf_counter() - t0, {}, err))
            except OSError:
                pass
        return code
    run.outputs.append("summary.json")
    summary = _summary(run, "ok", time.perf_counter() - t0, metrics)
    validate_json(summary, "summary")
    dio.write_json(run.out / "summary.json", summary)
    print(f"{args.command}: ok in {summary['wall_time']:.1f}s -> {run.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
