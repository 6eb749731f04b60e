"""Run configuration: sectioned key=value files, typed keys, CLI overrides.

Every key has a declared type and default. Unknown sections or keys are
rejected by name, and the fully resolved configuration is written next to
each run's outputs so the run can be repeated exactly.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .io import atomic_write


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _range(s: str) -> tuple[float, float]:
    parts = s.replace(",", ":").split(":")
    if len(parts) != 2:
        raise ValueError(f"expected 'lo:hi', got {s!r}")
    return float(parts[0]), float(parts[1])


def _ranges(s: str) -> list[tuple[float, float]]:
    return [_range(x) for x in s.split(";") if x.strip()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in _list(s)]


def _ints(s: str) -> list[int]:
    return [int(x) for x in _list(s)]


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip() == "" else float(s)


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip() == "" else int(s)


_FORMAT: dict[Callable, Callable[[Any], str]] = {
    _bool: lambda v: "true" if v else "false",
    _list: lambda v: ",".join(v),
    _range: lambda v: f"{v[0]!r}:{v[1]!r}",
    _ranges: lambda v: ";".join(f"{a!r}:{b!r}" for a, b in v),
    _floats: lambda v: ",".join(repr(x) for x in v),
    _ints: lambda v: ",".join(str(x) for x in v),
    _opt_float: lambda v: "" if v is None else repr(v),
    _opt_int: lambda v: "" if v is None else str(v),
    float: repr,
}

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "run": {
        "seed": (int, 0),
    },
    "data": {
        "root": (str, ""),
        "count": (int, 200),
        "seed": (int, 0),
        "width": (int, 128),
        "height": (int, 48),
        "baseline": (float, 0.54),
        "n_quads": (int, 4),
    },
    "asset": {
        "path": (str, ""),
        "width_m": (float, 1.8),
    },
    "model": {
        "checkpoint": (str, ""),
    },
    "attack": {
        "norm": (str, "L0"),
        "eps": (float, 0.1),
        "steps": (_opt_int, None),
        "step_size": (_opt_float, None),
        "eot_batch": (int, 12),
        "distance": (_range, (5.0, 30.0)),
        "angle_deg": (float, 30.0),
        "sparsity_weight": (float, 1e-3),
        "lighting": (_bool, True),
        "region": (str, "mask"),
        "object": (str, ""),
    },
    "train": {
        "methods": (_list, ["selfsup"]),
        "perturbation": (str, "L0"),
        "eps": (float, 0.1),
        "inner_steps": (int, 10),
        "attack_lr": (float, 0.05),
        "warm_start": (_bool, True),
        "sparsity_weight": (float, 1e-3),
        "lr": (float, 1e-4),
        "batch_size": (int, 4),
        "steps": (int, 2000),
        "pose_mode": (str, "fixed"),
        "distance": (_range, (5.0, 10.0)),
        "angle_deg": (float, 30.0),
        "mode": (str, "fine-tune"),
        "lighting": (_bool, True),
        "synthesis": (_bool, True),
        "jitter": (float, 0.2),
        "eval_every": (int, 0),
        "eval_scenes": (int, 8),
        "checkpoint_every": (int, 0),
        "widths": (_ints, [8, 16, 24, 32, 48]),
    },
    "eval": {
        "scenes": (int, 100),
        "distance": (_range, (5.0, 30.0)),
        "angle_deg": (float, 30.0),
        "seed": (int, 1234),
        "lighting": (_bool, True),
        "attack": (_bool, True),
        "benign_scenes": (int, 50),
    },
    "synth": {
        "index": (int, 0),
        "z_c": (_opt_float, None),
        "alpha_deg": (_opt_float, None),
        "distance": (_range, (5.0, 10.0)),
        "angle_deg": (float, 30.0),
        "lighting": (_bool, True),
        "object": (str, ""),
    },
    "transfer": {
        "checkpoints": (_list, []),
    },
    "ablate": {
        "distances": (_ranges, [(5.0, 5.0), (5.0, 10.0), (5.0, 30.0)]),
        "angles": (_floats, [0.0, 30.0]),
        "base_distance": (_range, (5.0, 10.0)),
        "base_angle": (float, 30.0),
    },
    "report": {
        "checkpoints": (_list, []),
        "expect": (_list, []),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, dotted: str) -> Any:
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec, kv in self.values.items():
            cp[sec] = {k: _FORMAT.get(SCHEMA[sec][k][0], str)(v) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {}
        for sec, kv in self.values.items():
            out[sec] = {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
        return out

    def write(self, path):
        with atomic_write(path, "w") as fh:
            fh.write(self.to_ini())


def _coerce(sec: str, key: str, raw: str):
    parser = SCHEMA[sec][key][0]
    try:
        return parser(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {sec}.{key}: {raw!r} ({e})") from None


def parse_overrides(items: Iterable[str]) -> list[tuple[str, str, str]]:
    out = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        if "." not in lhs:
            raise ConfigError(f"override key must be section.key, got {lhs!r}")
        sec, key = lhs.strip().split(".", 1)
        out.append((sec, key.strip(), raw.strip()))
    return out


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (), seed: Optional[int] = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides, then ``seed``."""
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    unknown: list[str] = []
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(p.read_text(), source=str(p))
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {p}: {e}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                unknown.append(f"[{sec}]")
                continue
            for key, raw in cp[sec].items():
                if key not in SCHEMA[sec]:
                    unknown.append(f"{sec}.{key}")
                    continue
                values[sec][key] = _coerce(sec, key, raw)
    for sec, key, raw in parse_overrides(overrides):
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            unknown.append(f"{sec}.{key}")
            continue
        values[sec][key] = _coerce(sec, key, raw)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    if seed is not None:
        values["run"]["seed"] = int(seed)
    return RunConfig(values)
