"""Image-shaped differentiable ops built on the kernel backend."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import backend
from .tensor import Tensor, _make, as_tensor


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIKK ``weight`` (zero padding)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weights")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    N, C, H, W = x.shape
    O, Ci, K, K2 = weight.shape
    if Ci != C:
        raise ValueError(f"input has {C} channels but kernel expects {Ci}")
    if K != K2:
        raise ValueError("only square kernels are supported")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if K > Hp or K > Wp:
        raise ValueError(f"kernel {K} does not fit padded input {Hp}x{Wp}")
    Ho = (Hp - K) // stride + 1
    Wo = (Wp - K) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = backend.im2col(xd, K, stride)                      # N, CKK, P
    wmat = weight.data.reshape(O, C * K * K)
    out = np.matmul(wmat, cols)                               # N, O, P
    if bias is not None:
        out += bias.data.reshape(1, O, 1)
    out = out.reshape(N, O, Ho, Wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(N, O, Ho * Wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gx = backend.col2im(np.ascontiguousarray(gcols), (N, C, Hp, Wp), K, stride)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, backward)


def grid_sample(image: Tensor, grid: Tensor):
    """Bilinearly sample ``image`` (N,C,H,W) at pixel coordinates ``grid`` (N,Ho,Wo,2).

    ``grid[..., 0]`` is the column (u) and ``grid[..., 1]`` the row (v);
    integer coordinates hit pixel centres exactly. Returns ``(out, valid)``
    where ``valid`` is a boolean (N,Ho,Wo) array that is False wherever the
    coordinate fell outside the image (the sample is border-clamped there).
    """
    image = as_tensor(image)
    grid = as_tensor(grid, image.dtype)
    if image.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != image.shape[0]:
        raise ValueError(f"shape mismatch: image {image.shape}, grid {grid.shape}")
    img, gr = image.data, grid.data
    out, valid = backend.grid_sample_forward(img, gr)

    def backward(g):
        gimg, ggrid = backend.grid_sample_backward(img, gr, np.ascontiguousarray(g))
        return (gimg if image.requires_grad else None, ggrid if grid.requires_grad else None)

    return _make(out, (image, grid), backward), valid


def box_filter3(x: Tensor) -> Tensor:
    """Mean over 3x3 windows without padding: (N,C,H,W) -> (N,C,H-2,W-2)."""
    xd = x.data
    out = sliding_window_view(xd, (3, 3), axis=(2, 3)).mean(axis=(-1, -2)).astype(xd.dtype, copy=False)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (2, 2), (2, 2)))
        return (sliding_window_view(gp, (3, 3), axis=(2, 3)).sum(axis=(-1, -2)) / 9,)

    return _make(out, (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    xd = x.data
    out = xd.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward)


def gradcheck(fn, inputs, eps: float = 1e-3, seed: int | None = None):
    """Compare analytic gradients with central finite differences.

    ``fn`` maps a list of tensors to a scalar tensor. Analytic gradients are
    taken in float32 (the production path); the finite-difference oracle
    re-evaluates ``fn`` on float64 copies so that rounding does not swamp
    the ``eps`` step. Returns the worst norm-wise relative error.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(tensors).backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        num = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = fn([Tensor(b, dtype=np.float64) for b in arrays]).item()
            flat[j] = orig - eps
            fm = fn([Tensor(b, dtype=np.float64) for b in arrays]).item()
            flat[j] = orig
            num.reshape(-1)[j] = (fp - fm) / (2 * eps)
        ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(a)
        denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst
