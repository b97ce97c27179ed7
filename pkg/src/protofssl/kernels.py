"""Backend selection for the distance/softmax kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``PROTOFSSL_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("PROTOFSSL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _prep(x):
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return np.ascontiguousarray(x)


def pairwise_sq_dist(a, b):
    a, b = _prep(a), _prep(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("pairwise_sq_dist expects 2-D inputs")
    b = b.astype(a.dtype, copy=False)
    return _impl.pairwise_sq_dist(a, np.ascontiguousarray(b))


def log_softmax_rows(z):
    z = _prep(z)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ValueError("log_softmax_rows expects a non-empty 2-D input")
    return _impl.log_softmax_rows(z)


def segment_mean(x, seg, n_seg):
    x = _prep(x)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    return _impl.segment_mean(x, seg, int(n_seg))
