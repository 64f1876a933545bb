"""NumPy implementations of the compiled kernels.

Results match ``_ckernels`` bitwise: segment reductions add contributions
one rank at a time, so each segment sees the same left-to-right sequence of
additions as the compiled loop.
"""
import numpy as np


def _ranks(order, indptr):
    counts = np.diff(indptr)
    seg = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    rank = np.arange(len(order), dtype=np.int64) - indptr[seg]
    return seg, rank, (int(counts.max()) if len(counts) else 0)


def segment_sum(values, order, indptr):
    out = np.zeros((len(indptr) - 1, values.shape[1]), dtype=values.dtype)
    if len(order) == 0:
        return out
    seg, rank, depth = _ranks(order, indptr)
    for r in range(depth):
        sel = rank == r
        out[seg[sel]] += values[order[sel]]
    return out


def segment_max(values, order, indptr):
    out = np.zeros((len(indptr) - 1, values.shape[1]), dtype=values.dtype)
    if len(order) == 0:
        return out
    seg, rank, depth = _ranks(order, indptr)
    out[np.unique(seg)] = -np.inf
    for r in range(depth):
        sel = rank == r
        rows = seg[sel]
        out[rows] = np.maximum(out[rows], values[order[sel]])
    return out


def _sqdist_matrix(coords):
    acc = np.zeros((len(coords), len(coords)), dtype=np.float64)
    for t in range(coords.shape[1]):
        diff = coords[:, None, t] - coords[None, :, t]
        acc += diff * diff
    return acc


def knn(coords, k):
    d2 = _sqdist_matrix(coords)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)


def radius_pairs(coords, radius):
    d2 = _sqdist_matrix(coords)
    np.fill_diagonal(d2, np.inf)
    dst, src = np.nonzero(d2 <= radius * radius)
    return src.astype(np.int64), dst.astype(np.int64)
