"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def pairwise_sq_dist(a, b):
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"inner dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    diff = a64[:, None, :] - b64[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff).astype(a.dtype)


def log_softmax_rows(z):
    z64 = z.astype(np.float64)
    mx = z64.max(axis=1, keepdims=True)
    lse = mx + np.log(np.exp(z64 - mx).sum(axis=1, keepdims=True))
    return (z64 - lse).astype(z.dtype)


def segment_mean(x, seg, n_seg):
    """Row means of ``x`` grouped by ``seg``; empty segments stay zero."""
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape[0] != x.shape[0]:
        raise ValueError("segment ids must match the number of rows")
    if seg.size and (seg.min() < 0 or seg.max() >= n_seg):
        raise ValueError(f"segment id out of range [0, {n_seg})")
    acc = np.zeros((n_seg, x.shape[1]), dtype=np.float64)
    np.add.at(acc, seg, x.astype(np.float64))
    counts = np.bincount(seg, minlength=n_seg).astype(np.int64)
    nz = counts > 0
    acc[nz] /= counts[nz, None]
    return acc.astype(x.dtype), counts
