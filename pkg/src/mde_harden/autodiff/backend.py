"""Kernel backend selection.

The compiled extension is used when it imports and ``MDE_HARDEN_PURE`` is
unset; otherwise every kernel runs through the numpy fallback. float64
inputs always take the numpy path.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("MDE_HARDEN_PURE"):
        raise ImportError("pure-python backend forced by MDE_HARDEN_PURE")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

NAME = "cython" if _compiled is not None else "numpy"


def _use_compiled(*arrays):
    return _compiled is not None and all(a.dtype == np.float32 for a in arrays)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def grid_sample_forward(img, grid):
    if _use_compiled(img, grid):
        return _compiled.grid_sample_forward(_c(img), _c(grid))
    return _kernels_py.grid_sample_forward(img, grid)


def grid_sample_backward(img, grid, gout):
    if _use_compiled(img, grid, gout):
        return _compiled.grid_sample_backward(_c(img), _c(grid), _c(gout))
    return _kernels_py.grid_sample_backward(img, grid, gout)


def im2col(x, K, stride):
    if _use_compiled(x):
        return _compiled.im2col(_c(x), K, stride)
    return _kernels_py.im2col(x, K, stride)


def col2im(cols, shape, K, stride):
    if _use_compiled(cols):
        return _compiled.col2im(_c(cols), tuple(shape), K, stride)
    return _kernels_py.col2im(cols, shape, K, stride)
