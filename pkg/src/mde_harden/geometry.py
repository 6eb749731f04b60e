"""Pinhole cameras, rigid transforms, board placement and depth-driven warping.

Pixel convention: integer coordinates ``(u, v) = (column, row)`` address
pixel centres, matching :func:`mde_harden.autodiff.grid_sample`. Board
coordinates ``(u_A, v_A)`` are continuous over ``[0, w] x [0, h]``, so board
pixel ``(i, j)`` has its centre at ``(i + 0.5, j + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

#: Scale-free determinant below which a board homography counts as edge-on.
DEGENERACY_TOL = 1e-2
#: Minimum source-camera depth for a warped point to count as in front.
MIN_Z = 1e-3


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def kitti_like(cls, width: int, height: int) -> "Intrinsics":
        """Normalised KITTI intrinsics rescaled to ``width`` x ``height``."""
        return cls(0.58 * width, 1.92 * height, 0.5 * width, 0.5 * height, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


class RigidTransform:
    """Rotation + translation stored as a 4x4 homogeneous matrix (float64)."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"expected a 4x4 matrix, got {m.shape}")
        R = m[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-5) or abs(np.linalg.det(R) - 1) > 1e-5:
            raise GeometryError("rotation block is not orthonormal with det 1")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise GeometryError("last row must be [0, 0, 0, 1]")
        m.flags.writeable = False
        self.matrix = m

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, R, t) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = np.asarray(t, dtype=np.float64).reshape(3)
        return cls(m)

    @classmethod
    def translation(cls, t) -> "RigidTransform":
        return cls.from_rt(np.eye(3), t)

    @classmethod
    def from_axis_angle(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rt(rodrigues(rotvec), t)

    @property
    def R(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        m = self.matrix @ other.matrix
        # re-orthonormalise so long chains stay inside the invariant
        u, _, vt = np.linalg.svd(m[:3, :3])
        m[:3, :3] = u @ vt
        return RigidTransform(m)

    def inverse(self) -> "RigidTransform":
        return RigidTransform.from_rt(self.R.T, -self.R.T @ self.t)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def tolist(self):
        return self.matrix.tolist()

    def __repr__(self):
        return f"RigidTransform(t={self.t.round(4).tolist()})"


def rodrigues(rotvec) -> np.ndarray:
    """Axis-angle vector -> 3x3 rotation matrix (exponential map)."""
    r = np.asarray(rotvec, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * Kx + (1 - math.cos(theta)) * (Kx @ Kx)


def backproject(pixel, depth, K: Intrinsics) -> np.ndarray:
    """Pixel(s) ``(..., 2)`` at ``depth`` -> camera-frame point(s) ``(..., 3)``."""
    px = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("depth must be positive")
    x = d * (px[..., 0] - K.cx) / K.fx
    y = d * (px[..., 1] - K.cy) / K.fy
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def project(point, K: Intrinsics):
    """Camera-frame point(s) -> ``(uv, valid)``; points with z <= 0 are invalid."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    u = K.fx * p[..., 0] / zs + K.cx
    v = K.fy * p[..., 1] / zs + K.cy
    uv = np.stack([u, v], axis=-1)
    uv = np.where(valid[..., None], uv, np.nan)
    return uv, valid


@dataclass(frozen=True)
class BoardPlacement:
    """Board at distance ``z_c`` with yaw ``alpha`` (radians)."""

    z_c: float
    alpha: float
    W: float
    H: float
    w: int
    h: int

    def __post_init__(self):
        if not self.z_c > 0:
            raise GeometryError("z_c must be positive")
        if not abs(self.alpha) < math.pi / 2:
            raise GeometryError("|alpha| must be below 90 degrees")
        if abs(self.W / self.w - self.H / self.h) > 1e-6:
            raise GeometryError("board aspect W/w must equal H/h")

    @property
    def alpha_deg(self) -> float:
        return math.degrees(self.alpha)

    def to_dict(self) -> dict:
        return {"z_c": self.z_c, "alpha_deg": self.alpha_deg, "W": self.W, "H": self.H, "w": self.w, "h": self.h}


def board_matrix(p: BoardPlacement) -> np.ndarray:
    """4x3 map from homogeneous board pixels ``(u_A, v_A, 1)`` to camera points."""
    ca, sa = math.cos(p.alpha), math.sin(p.alpha)
    outer = np.array([[ca, 0, -sa, 0],
                      [0, 1, 0, 0],
                      [sa, 0, ca, p.z_c],
                      [0, 0, 0, 1]], dtype=np.float64)
    inner = np.array([[p.W / p.w, 0, -p.W / 2],
                      [0, p.H / p.h, -p.H / 2],
                      [0, 0, 0],
                      [0, 0, 1]], dtype=np.float64)
    return outer @ inner


def board_to_cam(board_pixel, placement: BoardPlacement) -> np.ndarray:
    uv = np.asarray(board_pixel, dtype=np.float64)
    hom = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
    return (hom @ board_matrix(placement).T)[..., :3]


def _check_homography(Hm: np.ndarray, K: Intrinsics, placement: BoardPlacement, which: str):
    # scale-free determinant of the ray-space map with the board centred at its
    # origin: equals cos(viewing angle), so it -> 0 as the board turns edge-on
    centre = np.array([[1, 0, placement.w / 2], [0, 1, placement.h / 2], [0, 0, 1]], dtype=np.float64)
    A = K.inverse @ Hm @ centre
    ratio = abs(np.linalg.det(A)) / np.prod(np.linalg.norm(A, axis=0))
    if not np.isfinite(ratio) or ratio < DEGENERACY_TOL:
        raise GeometryError(f"degenerate homography for {which} view (ratio {ratio:.3g})")


def board_homographies(placement: BoardPlacement, K: Intrinsics, T_t2s: RigidTransform):
    """Plane-to-image homographies ``(H_A->t, H_A->s)`` for the board."""
    M = board_matrix(placement)
    Ht = K.matrix @ M[:3]
    Hs = K.matrix @ (T_t2s.matrix @ M)[:3]
    _check_homography(Ht, K, placement, "target")
    _check_homography(Hs, K, placement, "source")
    return Ht, Hs


def apply_homography(Hm: np.ndarray, pts) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    hom = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1) @ Hm.T
    return hom[..., :2] / hom[..., 2:3]


def board_depth_map(placement: BoardPlacement, K: Intrinsics) -> np.ndarray:
    """Per-pixel depth of the (infinite) board plane in the target view.

    The plane passes through ``(0, 0, z_c)`` with normal ``(-sin a, 0, cos a)``;
    pixels whose ray misses the front of the plane get ``inf``.
    """
    vv, uu = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    rx = (uu - K.cx) / K.fx
    n = np.array([-math.sin(placement.alpha), 0.0, math.cos(placement.alpha)])
    denom = n[0] * rx + n[2]
    with np.errstate(divide="ignore"):
        z = np.where(denom > 1e-9, n[2] * placement.z_c / np.where(denom > 1e-9, denom, 1.0), np.inf)
    return np.where(z > 0, z, np.inf)


# -- differentiable warping ---------------------------------------------------

def pixel_rays(K: Intrinsics, dtype=np.float32) -> np.ndarray:
    """K^-1 [u, v, 1] for every pixel, shape (3, H*W)."""
    vv, uu = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)])
    return (K.inverse @ pix).astype(dtype)


def axis_angle_to_matrix(rotvec: Tensor) -> Tensor:
    """Differentiable Rodrigues formula: (N, 3) -> (N, 3, 3)."""
    N = rotvec.shape[0]
    theta = ad.sqrt(ad.reduce_sum(ad.square(rotvec), axis=1, keepdims=True) + 1e-12)   # N,1
    k = rotvec / theta
    kx, ky, kz = k[:, 0], k[:, 1], k[:, 2]
    zero = ad.as_tensor(np.zeros(N, dtype=rotvec.dtype))
    Kx = ad.stack([ad.stack([zero, -kz, ky], axis=1),
                   ad.stack([kz, zero, -kx], axis=1),
                   ad.stack([-ky, kx, zero], axis=1)], axis=1)                       # N,3,3
    s = ad.reshape(ad.sin(theta), (N, 1, 1))
    c = ad.reshape(1 - ad.cos(theta), (N, 1, 1))
    eye = np.eye(3, dtype=rotvec.dtype)[None]
    return eye + s * Kx + c * (Kx @ Kx)


def warp_grid(depth: Tensor, R, t, K: Intrinsics):
    """Source-view sampling coordinates for every target pixel.

    ``depth`` is (N,1,H,W); ``R`` is (3,3) or (N,3,3); ``t`` is (3,) or (N,3),
    all mapping target-camera points into the source camera. Returns a grid
    tensor (N,H,W,2) differentiable w.r.t. depth, R and t, and a boolean
    validity mask (N,H,W) that is False behind the camera or off-image.
    """
    N, _, H, W = depth.shape
    if (H, W) != (K.height, K.width):
        raise GeometryError(f"depth resolution {W}x{H} does not match intrinsics {K.width}x{K.height}")
    dt = depth.dtype
    rays = pixel_rays(K, dt)
    R = ad.as_tensor(R, dt)
    t = ad.as_tensor(t, dt)
    if R.ndim == 2:
        R = ad.reshape(R, (1, 3, 3))
    t = ad.reshape(t, (-1, 3, 1))
    pts = ad.reshape(depth, (N, 1, H * W)) * rays                 # N,3,HW
    src = R @ pts + t
    z = src[:, 2]
    zd = z.data
    front = zd > MIN_Z
    z_safe = ad.where(front, z, 1.0)
    u = K.fx * src[:, 0] / z_safe + K.cx
    v = K.fy * src[:, 1] / z_safe + K.cy
    ud, vd = u.data, v.data
    valid = front & (ud >= 0) & (ud <= W - 1) & (vd >= 0) & (vd <= H - 1)
    grid = ad.reshape(ad.stack([u, v], axis=-1), (N, H, W, 2))
    return grid, valid.reshape(N, H, W)


@dataclass
class WarpField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    @property
    def grid(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


def warp_field(depth: np.ndarray, T: RigidTransform, K: Intrinsics) -> WarpField:
    """float64 per-pixel correspondence for a single (H, W) depth map."""
    d = np.asarray(depth, dtype=np.float64)
    if d.shape != (K.height, K.width):
        raise GeometryError(f"depth shape {d.shape} does not match intrinsics {K.height}x{K.width}")
    if np.any(~(d > 0)):
        raise GeometryError("depth must be strictly positive")
    H, W = d.shape
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    rays = pixel_rays(K, np.float64)
    pts = d.reshape(1, -1) * rays
    src = T.R @ pts + T.t[:, None]
    z = src[2]
    front = z > MIN_Z
    zs = np.where(front, z, 1.0)
    # pixel plus displacement, so the identity pose maps every pixel to itself exactly
    u = uu + (K.fx * (src[0] / zs - pts[0] / pts[2])).reshape(H, W)
    v = vv + (K.fy * (src[1] / zs - pts[1] / pts[2])).reshape(H, W)
    front = front.reshape(H, W)
    valid = front & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    return WarpField(u, v, valid)


def reconstruct_view(source: Tensor, grid, valid: np.ndarray):
    """Resample ``source`` (N,C,H,W) at ``grid``; returns ``(image, mask)``."""
    source = ad.as_tensor(source)
    if isinstance(grid, WarpField):
        valid = grid.valid[None] if valid is None else valid
        grid = grid.grid[None]
    grid = ad.as_tensor(grid, source.dtype)
    if grid.shape[1:3] != source.shape[2:]:
        raise GeometryError(f"warp {grid.shape[1:3]} does not match source {source.shape[2:]}")
    out, in_range = ad.grid_sample(source, grid)
    return out, np.asarray(valid, dtype=bool) & in_range
