import numpy as np
import pytest

from protofssl import kernels

from oracles import naive_mean, naive_sq_dist


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_pairwise_sq_dist_matches_loops(backend, rng, dtype):
    a = rng.normal(size=(4, 3)).astype(dtype)
    b = rng.normal(size=(5, 3)).astype(dtype)
    out = backend.pairwise_sq_dist(a, b)
    assert out.dtype == dtype
    np.testing.assert_allclose(out, naive_sq_dist(a, b), rtol=1e-5 if dtype == np.float32 else 1e-12)


def test_pairwise_sq_dist_rejects_mismatch(backend):
    with pytest.raises(ValueError):
        backend.pairwise_sq_dist(np.zeros((2, 3)), np.zeros((2, 4)))


def test_log_softmax_rows_is_stable(backend):
    z = np.array([[1e4, 0.0, -1e4], [3.0, 3.0, 3.0]])
    out = backend.log_softmax_rows(z)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out[1], np.log(1 / 3))


def test_segment_mean(backend, rng):
    x = rng.normal(size=(7, 4))
    seg = np.array([0, 2, 2, 0, 2, 0, 0], dtype=np.int64)
    means, counts = backend.segment_mean(x, seg, 4)
    assert counts.tolist() == [4, 0, 3, 0]
    np.testing.assert_allclose(means[0], naive_mean(x[seg == 0]))
    np.testing.assert_allclose(means[2], naive_mean(x[seg == 2]))
    assert np.all(means[[1, 3]] == 0)


def test_segment_mean_rejects_bad_ids(backend):
    with pytest.raises(ValueError):
        backend.segment_mean(np.zeros((2, 2)), np.array([0, 5], dtype=np.int64), 2)


def test_backends_agree(rng):
    pytest.importorskip("protofssl._kernels")
    from protofssl import _kernels, _kernels_py
    a = rng.normal(size=(30, 16)).astype(np.float32)
    b = rng.normal(size=(6, 16)).astype(np.float32)
    np.testing.assert_allclose(_kernels.pairwise_sq_dist(a, b), _kernels_py.pairwise_sq_dist(a, b), rtol=1e-6)
    z = -_kernels_py.pairwise_sq_dist(a, b)
    np.testing.assert_allclose(_kernels.log_softmax_rows(z), _kernels_py.log_softmax_rows(z), rtol=1e-5, atol=1e-5)


def test_dispatch_accepts_non_contiguous_and_int_input():
    a = np.arange(12).reshape(3, 4)[:, ::2]
    out = kernels.pairwise_sq_dist(a, a)
    assert out.shape == (3, 3)
    assert np.all(np.diag(out) == 0)
    assert kernels.BACKEND in ("cython", "python")
