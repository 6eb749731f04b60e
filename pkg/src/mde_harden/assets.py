"""Object boards: a 2D image of the target object plus its cut-out mask."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as dio


@dataclass
class ObjectAsset:
    image: np.ndarray        # (3, h, w) float32 in [0, 1]
    mask: np.ndarray         # (h, w) bool
    W: float                 # physical width, metres
    H: float                 # physical height, metres
    name: str = "object"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError("asset image must be (3, h, w)")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError("asset mask must match the image resolution")
        if abs(self.W / self.w - self.H / self.h) > 1e-6:
            raise ValueError("asset aspect must satisfy W/w == H/h")

    @property
    def h(self) -> int:
        return self.image.shape[1]

    @property
    def w(self) -> int:
        return self.image.shape[2]


def _blur(img, sigma):
    r = max(1, int(3 * sigma))
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    tmp = sum(k[i] * pad[:, :, i:i + img.shape[2]] for i in range(2 * r + 1))
    return sum(k[i] * tmp[:, i:i + img.shape[1], :] for i in range(2 * r + 1))


def make_car_asset(w: int = 48, h: int = 40, W: float = 1.8, seed: int = 0) -> ObjectAsset:
    """Procedural rear view of a car: body, rear window, lights, plate, tyres."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    body_col = rng.uniform(0.2, 0.8, 3)
    img = np.empty((3, h, w))
    img[:] = body_col[:, None, None] * (0.85 + 0.3 * (1 - v))[None]

    cabin = (v < 0.45) & (np.abs(u - 0.5) < 0.32 + 0.18 * v / 0.45)
    lower = (v >= 0.45) & (v < 0.92) & (np.abs(u - 0.5) < 0.5)
    tyres = (v >= 0.82) & ((np.abs(u - 0.12) < 0.09) | (np.abs(u - 0.88) < 0.09))
    mask = cabin | lower | tyres

    window = (v > 0.08) & (v < 0.40) & (np.abs(u - 0.5) < 0.26 + 0.16 * v / 0.45)
    img[:, window] = (np.array([0.12, 0.16, 0.22])[:, None] + 0.25 * (1 - v[window]) * 0.6)
    lights = (v > 0.50) & (v < 0.62) & ((np.abs(u - 0.12) < 0.08) | (np.abs(u - 0.88) < 0.08))
    img[:, lights] = np.array([0.85, 0.1, 0.08])[:, None]
    plate = (v > 0.62) & (v < 0.74) & (np.abs(u - 0.5) < 0.13)
    img[:, plate] = np.array([0.92, 0.92, 0.85])[:, None]
    bumper = (v > 0.78) & (v < 0.86) & (np.abs(u - 0.5) < 0.46)
    img[:, bumper] = np.array([0.15, 0.15, 0.15])[:, None]
    img[:, tyres] = np.array([0.05, 0.05, 0.05])[:, None]

    img = np.clip(_blur(img, 0.8), 0, 1)
    return ObjectAsset(img.astype(np.float32), mask, W, W * h / w, name="car")


def save_asset(asset: ObjectAsset, directory):
    d = Path(directory)
    dio.write_png(d / "object.png", asset.image)
    dio.write_png(d / "mask.png", asset.mask.astype(np.float32))
    dio.write_json(d / "object.json", {"W": asset.W, "H": asset.H, "name": asset.name})


def load_asset(directory, W: float | None = None) -> ObjectAsset:
    """Load ``object.png`` + ``mask.png``; physical size from ``object.json`` or ``W``."""
    d = Path(directory)
    for fname in ("object.png", "mask.png"):
        if not (d / fname).exists():
            raise FileNotFoundError(f"asset file missing: {d / fname}")
    image = dio.read_png(d / "object.png")
    mask = dio.read_png(d / "mask.png", mask=True)
    meta = dio.read_json(d / "object.json") if (d / "object.json").exists() else {}
    width_m = W if W is not None else meta.get("W")
    if width_m is None:
        raise ValueError(f"physical width unknown for asset {d}")
    h, w = mask.shape
    return ObjectAsset(image, mask, float(width_m), float(width_m) * h / w, name=meta.get("name", d.name))
