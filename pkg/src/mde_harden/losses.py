"""Photometric reconstruction error and the auxiliary training losses."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WEIGHT = 0.85


def ssim_dissimilarity(x: Tensor, y: Tensor) -> Tensor:
    """Per-pixel ``clip((1 - SSIM) / 2, 0, 1)`` over reflect-padded 3x3 windows."""
    x = ad.pad2d(ad.as_tensor(x), 1, "reflect")
    y = ad.pad2d(ad.as_tensor(y), 1, "reflect")
    mu_x = ad.box_filter3(x)
    mu_y = ad.box_filter3(y)
    sigma_x = ad.box_filter3(x * x) - mu_x * mu_x
    sigma_y = ad.box_filter3(y * y) - mu_y * mu_y
    sigma_xy = ad.box_filter3(x * y) - mu_x * mu_y
    n = (mu_x * mu_y * 2 + SSIM_C1) * (sigma_xy * 2 + SSIM_C2)
    d = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return ad.clip((1 - n / d) * 0.5, 0.0, 1.0)


def photometric_map(target: Tensor, recon: Tensor) -> Tensor:
    """(N,3,H,W) pair -> (N,1,H,W) blend of SSIM dissimilarity and L1, channel-averaged."""
    target, recon = ad.as_tensor(target), ad.as_tensor(recon)
    if target.shape != recon.shape:
        raise ValueError(f"image shapes differ: {target.shape} vs {recon.shape}")
    l1 = ad.reduce_mean(ad.absolute(target - recon), axis=1, keepdims=True)
    ssim = ad.reduce_mean(ssim_dissimilarity(target, recon), axis=1, keepdims=True)
    return ssim * SSIM_WEIGHT + l1 * (1 - SSIM_WEIGHT)


def photometric_error(target: Tensor, recon: Tensor, mask=None) -> Tensor:
    """Mean photometric error over pixels where ``mask`` (N,H,W or N,1,H,W) is set."""
    pe = photometric_map(target, recon)
    if mask is None:
        return ad.reduce_mean(pe)
    m = np.asarray(mask, dtype=np.float32).reshape(pe.shape)
    total = float(m.sum())
    if total == 0:
        raise ValueError("photometric error needs a non-empty validity mask")
    return ad.reduce_sum(pe * m) / total


def masked_mse(x: Tensor, y, mask=None) -> Tensor:
    d = ad.square(ad.as_tensor(x) - y)
    if mask is None:
        return ad.reduce_mean(d)
    m = np.asarray(mask, dtype=np.float32).reshape(d.shape)
    return ad.reduce_sum(d * m) / max(float(m.sum()), 1.0)


def negative_cosine(p: Tensor, z: Tensor) -> Tensor:
    """Mean over the batch of ``-cos(p, z)``; ``z`` is treated as a constant."""
    z = ad.as_tensor(z).detach()
    pn = p / ad.sqrt(ad.reduce_sum(ad.square(p), axis=1, keepdims=True) + 1e-12)
    zn = z / ad.sqrt(ad.reduce_sum(ad.square(z), axis=1, keepdims=True) + 1e-12)
    return -ad.reduce_mean(ad.reduce_sum(pn * zn, axis=1))
