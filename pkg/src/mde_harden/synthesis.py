"""Compositing an object board into a stereo pair.

Each output pixel is mapped back onto the board plane through the inverse
plane-to-image homography. Pixels landing on a masked board pixel take the
bilinearly sampled board colour (after a luminance gain that matches the
surrounding background); every other pixel keeps its background value
exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .assets import ObjectAsset
from .autodiff import Tensor
from .geometry import (MIN_Z, BoardPlacement, GeometryError, Intrinsics, board_depth_map, board_homographies,
                       board_matrix, reconstruct_view, warp_field)
from .scenes import SceneSample

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
GAIN_RANGE = (0.5, 2.0)
RING_RADIUS = 5
PREFILTER_STRENGTH = 1.0


@dataclass(frozen=True)
class PlacementSampler:
    """Uniform distance (metres) and yaw (degrees) ranges plus a seed."""

    distance: tuple = (5.0, 10.0)
    angle_deg: float = 30.0
    seed: int = 0

    def __post_init__(self):
        d1, d2 = self.distance
        if not 0 < d1 <= d2:
            raise ValueError(f"distance range must satisfy 0 < d1 <= d2, got {self.distance}")
        if not 0 <= self.angle_deg < 90:
            raise ValueError(f"angle range must lie in [0, 90), got {self.angle_deg}")

    def draw(self, index: int, asset: ObjectAsset) -> BoardPlacement:
        rng = np.random.default_rng([self.seed, index])
        z = rng.uniform(self.distance[0], self.distance[1])
        a = rng.uniform(-self.angle_deg, self.angle_deg)
        return BoardPlacement(float(z), math.radians(a), asset.W, asset.H, asset.w, asset.h)


def sample_placement(sampler: PlacementSampler, index: int, asset: ObjectAsset) -> BoardPlacement:
    """Draw ``index`` from ``sampler``; the same (seed, index) always gives the same board."""
    return sampler.draw(index, asset)


@dataclass
class BoardProjection:
    """Where a board lands in one view: asset sampling coordinates + coverage mask."""

    grid: np.ndarray     # (H, W, 2) float32, asset-image pixel coordinates
    mask: np.ndarray     # (H, W) bool
    footprint: int = 0   # pixels inside the board rectangle, ignoring the object mask

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def project_board(asset: ObjectAsset, board_to_cam: np.ndarray, K: Intrinsics) -> BoardProjection:
    """Inverse-homography rasterisation of the board into a view.

    ``board_to_cam`` is the 3x3 map from homogeneous board pixels to camera
    points in that view.
    """
    Hm = K.matrix @ board_to_cam
    vv, uu = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)])
    with np.errstate(divide="ignore", invalid="ignore"):
        b = np.linalg.solve(Hm, pix)
        uA, vA = b[0] / b[2], b[1] / b[2]
        z = (board_to_cam @ np.stack([uA, vA, np.ones_like(uA)]))[2]
    ok = np.isfinite(uA) & np.isfinite(vA) & (z > MIN_Z)
    ok &= (uA >= 0) & (uA < asset.w) & (vA >= 0) & (vA < asset.h)
    footprint = int(ok.sum())
    iu = np.clip(np.floor(np.where(ok, uA, 0)), 0, asset.w - 1).astype(np.intp)
    iv = np.clip(np.floor(np.where(ok, vA, 0)), 0, asset.h - 1).astype(np.intp)
    ok &= asset.mask[iv, iu]
    grid = np.stack([np.where(ok, uA - 0.5, 0), np.where(ok, vA - 0.5, 0)], axis=-1)
    return BoardProjection(grid.reshape(K.height, K.width, 2).astype(np.float32),
                           ok.reshape(K.height, K.width), footprint)


def _gauss_matrix(n: int, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.eye(n, dtype=np.float32)
    x = np.arange(n, dtype=np.float64)
    m = np.exp(-0.5 * ((x[:, None] - x[None, :]) / sigma) ** 2)
    return (m / m.sum(axis=1, keepdims=True)).astype(np.float32)


def prefilter_matrices(asset: ObjectAsset, placement: BoardPlacement, K: Intrinsics,
                       strength: float = PREFILTER_STRENGTH):
    """Row/column blur matrices that band-limit the board to the view's pixel footprint.

    The footprint is the number of board pixels covered by one image pixel at
    the board centre; below one pixel no blur is applied.
    """
    fp_u = placement.z_c / K.fx / (placement.W / placement.w)
    fp_v = placement.z_c / K.fy / (placement.H / placement.h)
    sig = [strength * math.sqrt(max(fp * fp - 1.0, 0.0)) for fp in (fp_v, fp_u)]
    return _gauss_matrix(asset.h, sig[0]), _gauss_matrix(asset.w, sig[1])


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square (Chebyshev) dilation by ``radius`` pixels."""
    out = mask.copy()
    H, W = mask.shape
    rows = np.zeros_like(mask)
    for d in range(-radius, radius + 1):
        rows[:, max(0, d):W + min(0, d)] |= mask[:, max(0, -d):W - max(0, d)]
    for d in range(-radius, radius + 1):
        out[max(0, d):H + min(0, d), :] |= rows[max(0, -d):H - max(0, d), :]
    return out


def luminance(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, np.asarray(img, dtype=np.float32), axes=(0, 0))


def lighting_gain(object_colors: np.ndarray, background: np.ndarray, mask: np.ndarray,
                  radius: int = RING_RADIUS) -> float:
    """Gain that moves the object's mean luminance to that of a background ring."""
    if not mask.any():
        raise ValueError("lighting match needs a non-empty object region")
    ring = dilate(mask, radius) & ~mask
    if not ring.any():
        return 1.0
    obj = float(luminance(object_colors)[mask].mean())
    ref = float(luminance(background)[ring].mean())
    if obj <= 0:
        return GAIN_RANGE[1]
    return float(np.clip(ref / obj, *GAIN_RANGE))


def lighting_match(object_colors: np.ndarray, background: np.ndarray, mask: np.ndarray,
                   enabled: bool = True, radius: int = RING_RADIUS):
    """Scale object colours by :func:`lighting_gain`; returns ``(colors, gain)``."""
    if not enabled:
        return np.asarray(object_colors), 1.0
    g = lighting_gain(object_colors, background, mask, radius)
    if g == 1.0:
        return np.asarray(object_colors), 1.0
    return np.clip(np.asarray(object_colors) * np.float32(g), 0, 1).astype(np.float32), g


@dataclass
class SynthesizedViews:
    I_t: np.ndarray
    I_s: np.ndarray
    I_adv_t: np.ndarray
    mask_t: np.ndarray
    mask_s: np.ndarray
    placement: BoardPlacement
    gain: float


class SynthesisPlan:
    """Everything about one (asset, scene, placement) that does not depend on the board's pixels.

    :meth:`render_target` is differentiable in the object image, which is
    what the attacks optimise through.
    """

    def __init__(self, asset: ObjectAsset, scene: SceneSample, placement: BoardPlacement,
                 lighting: bool = True):
        if (placement.w, placement.h) != (asset.w, asset.h):
            raise GeometryError("placement resolution does not match the asset")
        board_homographies(placement, scene.K, scene.T_t2s)      # raises on degeneracy
        M = board_matrix(placement)
        self.asset, self.scene, self.placement = asset, scene, placement
        self.target = project_board(asset, M[:3], scene.K)
        if self.target.footprint == 0:
            raise GeometryError("empty projection: board falls outside the target view")
        self.source = project_board(asset, (scene.T_t2s.matrix @ M)[:3], scene.K)
        self.blur_rows, self.blur_cols = prefilter_matrices(asset, placement, scene.K)
        self.gain = 1.0
        if lighting and self.target.area > 0:
            benign = self._sample(self.prefilter(asset.image), self.target)
            self.gain = lighting_gain(benign, scene.I0_t, self.target.mask)

    def prefilter(self, image):
        """Band-limit an object image (ndarray or Tensor, (3,h,w))."""
        if isinstance(image, Tensor):
            return self.blur_rows @ image @ self.blur_cols.T
        return (self.blur_rows @ np.asarray(image, dtype=np.float32) @ self.blur_cols.T).astype(np.float32)

    @staticmethod
    def _sample(image: np.ndarray, proj: BoardProjection) -> np.ndarray:
        with ad.no_grad():
            out, _ = ad.grid_sample(Tensor(image[None]), Tensor(proj.grid[None]))
        return out.data[0]

    def _composite(self, image: np.ndarray, proj: BoardProjection, background: np.ndarray) -> np.ndarray:
        col = self._sample(self.prefilter(image), proj)
        if self.gain != 1.0:
            col = np.clip(col * np.float32(self.gain), 0, 1)
        return np.where(proj.mask[None], col, background).astype(np.float32)

    def target_image(self, image: Optional[np.ndarray] = None) -> np.ndarray:
        return self._composite(self.asset.image if image is None else image, self.target, self.scene.I0_t)

    def source_image(self) -> np.ndarray:
        return self._composite(self.asset.image, self.source, self.scene.I0_s)

    def render_target(self, image: Tensor) -> Tensor:
        """Differentiable target view for object image ``image`` (3,h,w) -> (3,H,W)."""
        image = self.prefilter(ad.as_tensor(image))
        col, _ = ad.grid_sample(ad.reshape(image, (1,) + image.shape), Tensor(self.target.grid[None]))
        col = col[0]
        if self.gain != 1.0:
            col = ad.clip(col * self.gain, 0.0, 1.0)
        return ad.where(self.target.mask[None], col, self.scene.I0_t)


def try_plan(asset: ObjectAsset, scene: SceneSample, placement: BoardPlacement,
             lighting: bool = True) -> Optional[SynthesisPlan]:
    """A plan, or ``None`` when no object pixel is visible in the target view."""
    try:
        plan = SynthesisPlan(asset, scene, placement, lighting)
    except GeometryError:
        return None
    return plan if plan.target.area > 0 else None


def synthesize_pair(asset: ObjectAsset, scene: SceneSample, placement: BoardPlacement,
                    perturbed: Union[np.ndarray, None] = None, lighting: bool = True) -> SynthesizedViews:
    """Composite the board into both views and, optionally, a perturbed target view."""
    plan = SynthesisPlan(asset, scene, placement, lighting)
    I_t = plan.target_image()
    I_adv = I_t if perturbed is None else plan.target_image(perturbed)
    return SynthesizedViews(I_t=I_t, I_s=plan.source_image(), I_adv_t=I_adv,
                            mask_t=plan.target.mask.copy(), mask_s=plan.source.mask.copy(),
                            placement=placement, gain=plan.gain)


def _taps_inside(wf, mask: np.ndarray) -> np.ndarray:
    """True where all four bilinear taps of the warp land inside ``mask``."""
    H, W = mask.shape
    u0 = np.clip(np.floor(np.nan_to_num(wf.u)).astype(np.intp), 0, W - 1)
    v0 = np.clip(np.floor(np.nan_to_num(wf.v)).astype(np.intp), 0, H - 1)
    u1, v1 = np.minimum(u0 + 1, W - 1), np.minimum(v0 + 1, H - 1)
    return mask[v0, u0] & mask[v0, u1] & mask[v1, u0] & mask[v1, u1]


def object_consistency(views: SynthesizedViews, scene: SceneSample, far: float = 50.0):
    """Mean absolute error of the target object region rebuilt from the source view.

    The warp uses the board plane's analytic depth. Only target object pixels
    whose four source taps all fall on the source-view board are scored.
    Returns ``(error, n_pixels)``; the error is NaN when nothing is scored.
    """
    d = board_depth_map(views.placement, scene.K)
    d = np.where(np.isfinite(d), d, far)
    wf = warp_field(d, scene.T_t2s, scene.K)
    rec, valid = reconstruct_view(Tensor(views.I_s[None]), wf, None)
    sel = views.mask_t & valid[0] & _taps_inside(wf, views.mask_s)
    n = int(sel.sum())
    if n == 0:
        return float("nan"), 0
    return float(np.abs(rec.data[0] - views.I_t)[:, sel].mean()), n
