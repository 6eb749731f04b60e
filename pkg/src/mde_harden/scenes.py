"""Procedural stereo scenes with exact depth: a desk-scale road stand-in.

A scene is a textured ground plane, a backdrop wall and a handful of
textured vertical quads. Both views are ray-cast analytically from the same
world, so ground-truth depth and the stereo pose are exact. Textures are
smooth sums of sinusoids in surface coordinates, which keeps bilinear
resampling error small enough to verify warping against.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as dio
from .geometry import Intrinsics, RigidTransform

D_MIN, D_MAX = 0.1, 100.0


@dataclass
class SyntheticSceneSpec:
    width: int = 128
    height: int = 48
    baseline: float = 0.54
    ground_height: float = 1.65
    n_quads: int = 4
    quad_depth: tuple = (5.0, 40.0)
    backdrop_depth: float = 40.0
    intrinsics: Optional[Intrinsics] = None

    def __post_init__(self):
        if self.baseline < 0:
            raise ValueError("baseline must be non-negative")
        lo, hi = self.quad_depth
        if not (D_MIN < lo <= hi < D_MAX) or not (D_MIN < self.backdrop_depth < D_MAX):
            raise ValueError("scene depths must lie inside the depth mapping range")
        if self.intrinsics is None:
            self.intrinsics = Intrinsics.kitti_like(self.width, self.height)
        if (self.intrinsics.width, self.intrinsics.height) != (self.width, self.height):
            raise ValueError("intrinsics resolution does not match the spec")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quad_depth"] = list(self.quad_depth)
        d["intrinsics"] = self.intrinsics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["quad_depth"] = tuple(d["quad_depth"])
        d["intrinsics"] = Intrinsics.from_dict(d["intrinsics"])
        return cls(**d)


@dataclass
class SceneSample:
    """A background stereo pair; ``T_t2s`` maps target-camera points to the source camera."""

    I0_t: np.ndarray
    I0_s: np.ndarray
    T_t2s: RigidTransform
    K: Intrinsics
    depth: Optional[np.ndarray] = None
    visible: Optional[np.ndarray] = field(default=None, repr=False)
    name: str = ""

    def __post_init__(self):
        if self.I0_t.shape != self.I0_s.shape:
            raise ValueError("stereo images must share a resolution")
        if self.I0_t.shape[1:] != (self.K.height, self.K.width):
            raise ValueError("image resolution does not match intrinsics")


# -- texturing ---------------------------------------------------------------

class _Texture:
    """Smooth colour field over 2D surface coordinates."""

    def __init__(self, rng, base, contrast, min_wavelength, max_wavelength, n=4):
        self.base = np.asarray(base, dtype=np.float64)
        ang = rng.uniform(0, math.pi, n)
        lam = rng.uniform(min_wavelength, max_wavelength, n)
        self.k = np.stack([np.cos(ang), np.sin(ang)], 1) * (2 * math.pi / lam)[:, None]
        self.phase = rng.uniform(0, 2 * math.pi, n)
        self.amp = rng.uniform(0.3, 1.0, n) * contrast / n
        self.tint = rng.uniform(0.6, 1.4, (n, 3))

    def __call__(self, s, t):
        arg = s[..., None] * self.k[:, 0] + t[..., None] * self.k[:, 1] + self.phase
        wave = np.sin(arg) * self.amp                       # ..., n
        col = self.base + wave @ self.tint
        return np.clip(col, 0.02, 0.98)


class _World:
    def __init__(self, spec: SyntheticSceneSpec, rng):
        self.spec = spec
        self.ground = _Texture(rng, rng.uniform(0.3, 0.45, 3) * [1, 1, 1.05], 0.5, 1.5, 6.0)
        self.wall = _Texture(rng, rng.uniform(0.45, 0.7, 3), 0.5, 2.0, 8.0)
        self.quads = []
        lo, hi = spec.quad_depth
        for _ in range(spec.n_quads):
            z = rng.uniform(lo, hi)
            half_fov = z * (spec.intrinsics.width / 2) / spec.intrinsics.fx
            self.quads.append(dict(
                cx=rng.uniform(-half_fov, half_fov),
                cz=z,
                yaw=rng.uniform(-0.6, 0.6),
                half_w=rng.uniform(0.6, 3.0),
                height=rng.uniform(1.2, 5.0),
                tex=_Texture(rng, rng.uniform(0.15, 0.85, 3), 0.6, 0.8, 4.0),
            ))

    def cast(self, origin, u, v):
        """Ray-cast from camera ``origin`` (target frame) through pixels ``(u, v)``.

        Returns (depth along the camera z-axis, colour (...,3)).
        """
        K = self.spec.intrinsics
        dx = (u - K.cx) / K.fx
        dy = (v - K.cy) / K.fy
        ox, oy, oz = origin
        best = np.full(u.shape, np.inf)
        col = np.zeros(u.shape + (3,))

        # backdrop wall z = const
        tz = self.spec.backdrop_depth - oz
        if tz > 0:
            X, Y = ox + tz * dx, oy + tz * dy
            best[:] = tz
            col[:] = self.wall(X, Y)

        # ground plane y = ground_height
        gh = self.spec.ground_height - oy
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dy > 1e-9, gh / np.where(dy > 1e-9, dy, 1.0), np.inf)
        hit = tg < best
        if hit.any():
            tg = np.where(hit, tg, 0.0)
            X, Z = ox + tg * dx, oz + tg
            best = np.where(hit, tg, best)
            col = np.where(hit[..., None], self.ground(X, Z), col)

        for q in self.quads:
            # vertical plane through (cx, *, cz) with in-plane direction (cos, 0, sin)
            ca, sa = math.cos(q["yaw"]), math.sin(q["yaw"])
            nx, nz = -sa, ca
            denom = nx * dx + nz
            with np.errstate(divide="ignore", invalid="ignore"):
                tq = (nx * (q["cx"] - ox) + nz * (q["cz"] - oz)) / denom
            tq = np.where(np.isfinite(tq), tq, -1.0)
            X, Y, Z = ox + tq * dx, oy + tq * dy, oz + tq
            s = (X - q["cx"]) * ca + (Z - q["cz"]) * sa
            top = self.spec.ground_height - q["height"]
            hit = (tq > 0) & (np.abs(s) <= q["half_w"]) & (Y >= top) & (Y <= self.spec.ground_height) & (tq < best)
            if hit.any():
                best = np.where(hit, tq, best)
                col = np.where(hit[..., None], q["tex"](s, Y), col)
        return best, col


def generate_scene(spec: SyntheticSceneSpec, seed: int, name: str = "") -> SceneSample:
    """Render a target/source pair plus exact depth and visibility."""
    rng = np.random.default_rng(seed)
    world = _World(spec, rng)
    K = spec.intrinsics
    vv, uu = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    src_origin = (spec.baseline, 0.0, 0.0)
    depth, col_t = world.cast((0.0, 0.0, 0.0), uu, vv)
    _, col_s = world.cast(src_origin, uu, vv)
    T = RigidTransform.translation((-spec.baseline, 0.0, 0.0))

    # visibility: the target point must be the first hit seen from the source camera
    X = depth * (uu - K.cx) / K.fx
    Y = depth * (vv - K.cy) / K.fy
    Xs, Ys, Zs = X - spec.baseline, Y, depth
    us = K.fx * Xs / Zs + K.cx
    vs = K.fy * Ys / Zs + K.cy
    ds, _ = world.cast(src_origin, us, vs)
    visible = np.abs(ds - Zs) <= 1e-6 * Zs

    return SceneSample(
        I0_t=col_t.transpose(2, 0, 1).astype(np.float32),
        I0_s=col_s.transpose(2, 0, 1).astype(np.float32),
        T_t2s=T, K=K, depth=depth.astype(np.float32), visible=visible, name=name,
    )


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_scenes(spec: SyntheticSceneSpec, count: int, seed: int) -> list[SceneSample]:
    return [generate_scene(spec, scene_seed(seed, i), name=f"scene_{i:04d}") for i in range(count)]


def split_by_parity(scenes):
    """Even indices train, odd indices evaluate."""
    return scenes[0::2], scenes[1::2]


# -- disk format ----------------------------------------------------------------

def save_scene(scene: SceneSample, directory):
    d = Path(directory)
    dio.write_png(d / "it.png", scene.I0_t)
    dio.write_png(d / "is.png", scene.I0_s)
    if scene.depth is not None:
        dio.write_tensor_container(d / "depth_gt.dht", {"depth": scene.depth})
    dio.write_json(d / "pose.json", {"T_t2s": scene.T_t2s.tolist()})
    dio.write_json(d / "intrinsics.json", scene.K.to_dict())


def load_scene(directory) -> SceneSample:
    d = Path(directory)
    for fname in ("it.png", "is.png", "pose.json", "intrinsics.json"):
        if not (d / fname).exists():
            raise FileNotFoundError(f"scene file missing: {d / fname}")
    depth = None
    if (d / "depth_gt.dht").exists():
        depth = dio.read_tensor_container(d / "depth_gt.dht")["depth"]
    return SceneSample(
        I0_t=dio.read_png(d / "it.png"),
        I0_s=dio.read_png(d / "is.png"),
        T_t2s=RigidTransform(dio.read_json(d / "pose.json")["T_t2s"]),
        K=Intrinsics.from_dict(dio.read_json(d / "intrinsics.json")),
        depth=depth,
        name=d.name,
    )


def generate_dataset(spec: SyntheticSceneSpec, count: int, seed: int, root) -> dict:
    """Write ``count`` scene directories plus ``manifest.json`` under ``root``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    root = Path(root)
    entries = []
    for i in range(count):
        s = scene_seed(seed, i)
        name = f"scene_{i:04d}"
        save_scene(generate_scene(spec, s, name), root / name)
        entries.append({"name": name, "seed": s, "split": "train" if i % 2 == 0 else "eval"})
    manifest = {"format": "mde-harden-scenes/1", "seed": seed, "count": count,
                "spec": spec.to_dict(), "scenes": entries}
    dio.write_json(root / "manifest.json", manifest)
    return manifest


def regenerate_from_manifest(manifest_path, root):
    m = dio.read_json(manifest_path)
    return generate_dataset(SyntheticSceneSpec.from_dict(m["spec"]), m["count"], m["seed"], root)


def load_dataset(root, split: Optional[str] = None) -> list[SceneSample]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    mpath = root / "manifest.json"
    if mpath.exists():
        entries = dio.read_json(mpath)["scenes"]
        names = [e["name"] for e in entries if split is None or e["split"] == split]
    else:
        names = sorted(p.name for p in root.iterdir() if (p / "it.png").exists())
        if split is not None:
            names = names[0::2] if split == "train" else names[1::2]
    return [load_scene(root / n) for n in names]
