"""Hot-loop kernels with a compiled backend and a NumPy fallback.

The compiled extension is used when it imports cleanly; set
``FIMP_PURE_PYTHON=1`` to force the fallback. Both backends return
bitwise-identical results.
"""
import os

import numpy as np

from fimp.kernels import _pykernels

if os.environ.get("FIMP_PURE_PYTHON", "") not in ("", "0"):
    _ext = None
else:
    try:
        from fimp.kernels import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "compiled" if _ext is not None else "python"


def _backend(name):
    return _pykernels if name == "python" else (_ext or _pykernels)


def segment_sum(values, order, indptr, backend=None):
    """Sum rows of ``values`` into segments.

    Segment ``s`` receives ``values[order[p]]`` for ``p`` in
    ``indptr[s]:indptr[s+1]``, added strictly in that sequence, starting from
    zero. Empty segments are zero.
    """
    values = np.ascontiguousarray(values)
    flat = values.reshape(values.shape[0], int(np.prod(values.shape[1:])))
    out = _backend(backend).segment_sum(
        flat, np.ascontiguousarray(order, dtype=np.int64),
        np.ascontiguousarray(indptr, dtype=np.int64))
    return np.asarray(out).reshape((len(indptr) - 1,) + values.shape[1:])


def segment_max(values, order, indptr, backend=None):
    values = np.ascontiguousarray(values)
    flat = values.reshape(values.shape[0], int(np.prod(values.shape[1:])))
    out = _backend(backend).segment_max(
        flat, np.ascontiguousarray(order, dtype=np.int64),
        np.ascontiguousarray(indptr, dtype=np.int64))
    return np.asarray(out).reshape((len(indptr) - 1,) + values.shape[1:])


def knn(coords, k, backend=None):
    """Indices of the ``k`` nearest other points per row; ties go to the smaller id."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    return np.asarray(_backend(backend).knn(coords, int(k)))


def radius_pairs(coords, radius, backend=None):
    """``(src, dst)`` arrays of all ordered pairs within ``radius``, self excluded."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    return _backend(backend).radius_pairs(coords, float(radius))


def grouping(index, num_segments):
    """Stable ordering and CSR offsets that group positions by ``index`` value."""
    index = np.asarray(index, dtype=np.int64)
    order = np.argsort(index, kind="stable")
    indptr = np.zeros(num_segments + 1, dtype=np.int64)
    np.cumsum(np.bincount(index, minlength=num_segments), out=indptr[1:])
    return order, indptr
