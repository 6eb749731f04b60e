"""Toy depth and pose networks, the disparity/depth mapping, and checkpoints."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import io as dio
from .autodiff import Tensor
from .geometry import RigidTransform, axis_angle_to_matrix, rodrigues
from .nn import Conv2d, Linear, Module

D_MIN, D_MAX = 0.1, 100.0
CHECKPOINT_FORMAT = 1
DEPTH_ARCH = "toy-depthnet-v1"
POSE_ARCH = "toy-posenet-v1"
INIT_DEPTH = 10.0
POSE_SCALE = 0.01


class DispDepthMapping:
    def __init__(self, d_min: float = D_MIN, d_max: float = D_MAX):
        if not 0 < d_min < d_max:
            raise ValueError("need 0 < d_min < d_max")
        self.d_min, self.d_max = d_min, d_max

    @property
    def inv_range(self) -> tuple[float, float]:
        return 1.0 / self.d_max, 1.0 / self.d_min - 1.0 / self.d_max

    def to_depth(self, disp):
        lo, span = self.inv_range
        if isinstance(disp, Tensor):
            return ad.reciprocal(disp * span + lo)
        s = np.asarray(disp, dtype=np.float64)
        if np.any((s <= 0) | (s >= 1)):
            raise ValueError("disparity must lie strictly inside (0, 1)")
        return 1.0 / (lo + span * s)

    def to_disp(self, depth):
        lo, span = self.inv_range
        return (1.0 / np.asarray(depth, dtype=np.float64) - lo) / span


def disp_to_depth(disp, d_min: float = D_MIN, d_max: float = D_MAX):
    """``1/depth = 1/d_max + (1/d_min - 1/d_max) * disp``."""
    return DispDepthMapping(d_min, d_max).to_depth(disp)


class DepthNet(Module):
    """Encoder with four stride-2 stages, a mirrored decoder with skips, sigmoid disparity head."""

    arch = DEPTH_ARCH

    def __init__(self, widths: Sequence[int] = (8, 16, 24, 32, 48), seed: int = 0,
                 d_min: float = D_MIN, d_max: float = D_MAX, init_depth: float = INIT_DEPTH):
        rng = np.random.default_rng(seed)
        w = list(widths)
        if len(w) != 5:
            raise ValueError("DepthNet takes five stage widths")
        self.widths = tuple(w)
        self.mapping = DispDepthMapping(d_min, d_max)
        self.stem = Conv2d(3, w[0], 3, 1, rng)
        self.enc = [Conv2d(w[i], w[i + 1], 3, 2, rng) for i in range(4)]
        # decoder stage j upsamples level 4-j and fuses the skip from level 3-j
        self.dec = [Conv2d(w[4 - j] + w[3 - j], w[3 - j], 3, 1, rng) for j in range(4)]
        self.head = Conv2d(w[0], 1, 3, 1, rng)
        # start near-constant at init_depth so early warps stay on-image
        s0 = float(self.mapping.to_disp(init_depth))
        self.head.weight = Tensor(self.head.weight.data * 0.1, requires_grad=True)
        self.head.bias = Tensor(np.full(1, np.log(s0 / (1 - s0))), requires_grad=True)

    def encode(self, x: Tensor) -> list[Tensor]:
        feats = [ad.elu(self.stem(x))]
        for conv in self.enc:
            feats.append(ad.elu(conv(feats[-1])))
        return feats

    def disparity(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N,3,H,W) images, got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ValueError(f"image resolution {x.shape[3]}x{x.shape[2]} is not divisible by 16")
        feats = self.encode(x)
        y = feats[4]
        for j, conv in enumerate(self.dec):
            y = ad.elu(conv(ad.concat([ad.upsample2x(y), feats[3 - j]], axis=1)))
        return ad.sigmoid(self.head(y))

    def forward(self, x: Tensor) -> Tensor:
        """Metric depth (N,1,H,W), strictly inside (d_min, d_max)."""
        return self.mapping.to_depth(self.disparity(x))

    def embedding(self, x: Tensor) -> Tensor:
        """Globally average-pooled deepest encoder features, (N, C)."""
        return ad.reduce_mean(self.encode(ad.as_tensor(x))[4], axis=(2, 3))

    def config(self) -> dict:
        return {"widths": list(self.widths), "d_min": self.mapping.d_min, "d_max": self.mapping.d_max}


class PoseNet(Module):
    """Regresses axis-angle rotation and translation from a concatenated image pair."""

    arch = POSE_ARCH

    def __init__(self, widths: Sequence[int] = (16, 24, 32, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        chans = [6] + list(widths)
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, 2, rng) for i in range(len(widths))]
        self.out = Linear(chans[-1], 6, rng)

    def forward(self, I_s: Tensor, I_t: Tensor) -> Tensor:
        I_s, I_t = ad.as_tensor(I_s), ad.as_tensor(I_t)
        if I_s.shape != I_t.shape:
            raise ValueError("pose network needs two images of the same shape")
        y = ad.concat([I_s, I_t], axis=1)
        for conv in self.convs:
            y = ad.relu(conv(y))
        return self.out(ad.reduce_mean(y, axis=(2, 3))) * POSE_SCALE           # N, 6

    def config(self) -> dict:
        return {"widths": list(self.widths)}


def pose_vector_to_rt(vec: Tensor):
    """(N,6) -> differentiable rotation (N,3,3) and translation (N,3)."""
    return axis_angle_to_matrix(vec[:, :3]), vec[:, 3:]


def pose_forward(net: PoseNet, I_s, I_t) -> list[RigidTransform]:
    with ad.no_grad():
        vec = net(I_s, I_t).data.astype(np.float64)
    return [RigidTransform.from_rt(rodrigues(v[:3]), v[3:]) for v in vec]


def depth_forward(net: DepthNet, image) -> Tensor:
    return net(image)


# -- checkpoints -----------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _manifest(net: Module, step: int, extra: Optional[dict]) -> dict:
    m = {"format_version": CHECKPOINT_FORMAT, "architecture": net.arch, "config": net.config(), "step": int(step)}
    if isinstance(net, DepthNet):
        m["mapping"] = {"d_min": net.mapping.d_min, "d_max": net.mapping.d_max}
    if extra:
        m["extra"] = extra
    return m


def save_checkpoint(net: Module, directory, step: int = 0, extra: Optional[dict] = None):
    """Write ``params.dht`` and ``manifest.json`` under ``directory``."""
    d = Path(directory)
    dio.write_tensor_container(d / "params.dht", net.state_dict())
    dio.write_json(d / "manifest.json", _manifest(net, step, extra))


def read_manifest(directory) -> dict:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint manifest missing: {path}")
    m = dio.read_json(path)
    if m.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint {d}: format version {m.get('format_version')} != {CHECKPOINT_FORMAT}")
    return m


def load_checkpoint(directory) -> tuple[Module, dict]:
    d = Path(directory)
    m = read_manifest(d)
    arch = m.get("architecture")
    if arch == DEPTH_ARCH:
        cfg = m["config"]
        net: Module = DepthNet(cfg["widths"], d_min=cfg["d_min"], d_max=cfg["d_max"])
    elif arch == POSE_ARCH:
        net = PoseNet(m["config"]["widths"])
    else:
        raise CheckpointError(f"checkpoint {d}: unknown architecture {arch!r}")
    if not (d / "params.dht").exists():
        raise FileNotFoundError(f"checkpoint parameters missing: {d / 'params.dht'}")
    net.load_state_dict(dio.read_tensor_container(d / "params.dht"))
    return net, m
