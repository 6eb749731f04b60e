"""Pure-numpy reference kernels.

These are the fallback when the compiled ``_kernels`` extension is missing,
and they are the only path for float64 arrays (used by finite-difference
gradient checks). The compiled module must match these semantics exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _corners(grid, H, W):
    u = grid[..., 0]
    v = grid[..., 1]
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, 0.0)
    v = np.where(finite, v, 0.0)
    inside_u = (u >= 0) & (u <= W - 1)
    inside_v = (v >= 0) & (v <= H - 1)
    valid = inside_u & inside_v & finite
    uc = np.clip(u, 0, W - 1)
    vc = np.clip(v, 0, H - 1)
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (uc - x0).astype(grid.dtype)
    wy = (vc - y0).astype(grid.dtype)
    return x0, x1, y0, y1, wx, wy, valid, inside_u, inside_v


def grid_sample_forward(img, grid):
    """Bilinear sampling of ``img`` (N,C,H,W) at pixel coords ``grid`` (N,Ho,Wo,2).

    Returns the sampled image (N,C,Ho,Wo) and a validity mask (N,Ho,Wo).
    Coordinates outside ``[0, W-1] x [0, H-1]`` are clamped to the border.
    """
    N, C, H, W = img.shape
    _, Ho, Wo, _ = grid.shape
    x0, x1, y0, y1, wx, wy, valid, _, _ = _corners(grid, H, W)
    flat = img.reshape(N, C, H * W)

    def gather(yy, xx):
        idx = (yy * W + xx).reshape(N, 1, Ho * Wo)
        return np.take_along_axis(flat, np.broadcast_to(idx, (N, C, Ho * Wo)), axis=2).reshape(N, C, Ho, Wo)

    wx_ = wx[:, None]
    wy_ = wy[:, None]
    out = ((1 - wx_) * (1 - wy_) * gather(y0, x0) + wx_ * (1 - wy_) * gather(y0, x1)
           + (1 - wx_) * wy_ * gather(y1, x0) + wx_ * wy_ * gather(y1, x1))
    return out.astype(img.dtype, copy=False), valid


def grid_sample_backward(img, grid, gout):
    N, C, H, W = img.shape
    _, Ho, Wo, _ = grid.shape
    x0, x1, y0, y1, wx, wy, _, inside_u, inside_v = _corners(grid, H, W)
    wx_ = wx[:, None]
    wy_ = wy[:, None]

    base = (np.arange(N * C, dtype=np.int64) * (H * W)).reshape(N, C, 1, 1)
    gimg = np.zeros(N * C * H * W, dtype=np.float64)
    for yy, xx, w in ((y0, x0, (1 - wx_) * (1 - wy_)), (y0, x1, wx_ * (1 - wy_)),
                      (y1, x0, (1 - wx_) * wy_), (y1, x1, wx_ * wy_)):
        idx = base + (yy * W + xx)[:, None]
        gimg += np.bincount(idx.ravel(), weights=(w * gout).ravel(), minlength=N * C * H * W)
    gimg = gimg.reshape(N, C, H, W).astype(img.dtype)

    flat = img.reshape(N, C, H * W)

    def gather(yy, xx):
        idx = (yy * W + xx).reshape(N, 1, Ho * Wo)
        return np.take_along_axis(flat, np.broadcast_to(idx, (N, C, Ho * Wo)), axis=2).reshape(N, C, Ho, Wo)

    i00, i01, i10, i11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    du = ((1 - wy_) * (i01 - i00) + wy_ * (i11 - i10)) * gout
    dv = ((1 - wx_) * (i10 - i00) + wx_ * (i11 - i01)) * gout
    ggrid = np.empty(grid.shape, dtype=grid.dtype)
    ggrid[..., 0] = du.sum(axis=1) * inside_u
    ggrid[..., 1] = dv.sum(axis=1) * inside_v
    return gimg, ggrid


def im2col(x, K, stride):
    """(N,C,H,W) padded input -> (N, C*K*K, Ho*Wo) patch matrix."""
    N, C, H, W = x.shape
    Ho = (H - K) // stride + 1
    Wo = (W - K) // stride + 1
    win = sliding_window_view(x, (K, K), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(N, C * K * K, Ho * Wo)


def col2im(cols, shape, K, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back into an (N,C,H,W) array."""
    N, C, H, W = shape
    Ho = (H - K) // stride + 1
    Wo = (W - K) // stride + 1
    cols = cols.reshape(N, C, K, K, Ho, Wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for ki in range(K):
        for kj in range(K):
            out[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += cols[:, :, ki, kj]
    return out
