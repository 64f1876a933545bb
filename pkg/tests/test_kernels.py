import numpy as np
from hypothesis import given, strategies as st

from fimp import kernels
from fimp.numerics import Rng

BACKENDS = ("python", "compiled")


def test_compiled_backend_is_built():
    assert kernels.BACKEND == "compiled"


@given(st.integers(0, 2**31), st.integers(0, 30), st.integers(1, 6), st.integers(1, 5),
       st.sampled_from([np.float32, np.float64]))
def test_segment_reductions_agree_across_backends(seed, n, width, nseg, dtype):
    rng = Rng(seed)
    values = rng.normal((n, width)).astype(dtype)
    order = rng.permutation(n).astype(np.int64)
    cuts = np.sort(rng.integers(0, n + 1, nseg - 1)) if nseg > 1 else np.zeros(0, dtype=np.int64)
    indptr = np.concatenate([[0], cuts, [n]]).astype(np.int64)
    for fn in (kernels.segment_sum, kernels.segment_max):
        py, c = fn(values, order, indptr, "python"), fn(values, order, indptr, "compiled")
        assert py.dtype == c.dtype == dtype
        assert np.array_equal(py, c)
    ref = np.zeros((nseg, width))
    for s in range(nseg):
        for p in range(indptr[s], indptr[s + 1]):
            ref[s] += values[order[p]]
    np.testing.assert_allclose(kernels.segment_sum(values, order, indptr), ref, rtol=1e-5, atol=1e-5)


def test_segment_max_empty_segment_is_zero_and_nan_propagates():
    v = np.array([[1.0], [np.nan], [3.0], [2.0]])
    order, indptr = np.arange(4), np.array([0, 2, 2, 4])
    for b in BACKENDS:
        out = kernels.segment_max(v, order, indptr, b)
        assert np.isnan(out[0, 0]) and out[1, 0] == 0 and out[2, 0] == 3


def _brute_knn(coords, k):
    d = ((coords[:, None] - coords[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    return np.stack([np.lexsort((np.arange(len(coords)), row))[:k] for row in d])


@given(st.integers(0, 2**31), st.integers(2, 40), st.integers(1, 3))
def test_knn_matches_brute_force(seed, n, dim):
    coords = Rng(seed).uniform((n, dim))
    k = min(5, n - 1)
    ref = _brute_knn(coords, k)
    for b in BACKENDS:
        assert np.array_equal(kernels.knn(coords, k, b), ref)


def test_knn_tie_goes_to_smaller_id():
    coords = np.array([[0.0], [1.0], [2.0]])
    for b in BACKENDS:
        assert kernels.knn(coords, 1, b)[1, 0] == 0


@given(st.integers(0, 2**31), st.integers(1, 40), st.floats(0.01, 0.6))
def test_radius_pairs_match_brute_force(seed, n, r):
    coords = Rng(seed).uniform((n, 2))
    d = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    ref = {(i, j) for i in range(n) for j in range(n) if i != j and d[i, j] <= r}
    for b in BACKENDS:
        src, dst = kernels.radius_pairs(coords, r, b)
        assert set(zip(src.tolist(), dst.tolist())) == ref


def test_grouping_is_stable_csr():
    idx = np.array([2, 0, 2, 1, 0])
    order, indptr = kernels.grouping(idx, 4)
    assert order.tolist() == [1, 4, 3, 0, 2]
    assert indptr.tolist() == [0, 2, 3, 5, 5]
