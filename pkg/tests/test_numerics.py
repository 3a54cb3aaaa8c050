import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridbnn import numerics
from hybridbnn.numerics import NotPositiveDefinite, Rng


def random_spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


def test_cholesky_diagonal():
    np.testing.assert_array_equal(numerics.cholesky([[4.0, 0.0], [0.0, 9.0]]), [[2.0, 0.0], [0.0, 3.0]])


def test_cholesky_2x2():
    L = numerics.cholesky([[4.0, 2.0], [2.0, 3.0]])
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], rtol=1e-14)
    np.testing.assert_allclose(L @ L.T, [[4.0, 2.0], [2.0, 3.0]], rtol=1e-14)


def test_cholesky_indefinite_raises():
    with pytest.raises(NotPositiveDefinite):
        numerics.cholesky([[1.0, 2.0], [2.0, 1.0]])


def test_cholesky_rejects_asymmetric():
    with pytest.raises(ValueError):
        numerics.cholesky([[1.0, 0.5], [0.0, 1.0]])


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**32 - 1))
def test_cholesky_reconstructs(n, seed):
    A = random_spd(np.random.default_rng(seed), n)
    L = numerics.cholesky(A)
    assert np.all(np.triu(L, 1) == 0)
    assert np.all(np.diag(L) > 0)
    assert np.linalg.norm(L @ L.T - A) / np.linalg.norm(A) < 1e-8


def test_jittered_cholesky_identity_uses_first_step():
    L, jitter = numerics.jittered_cholesky(np.eye(3))
    assert jitter == 1e-6
    np.testing.assert_allclose(L, math.sqrt(1 + 1e-6) * np.eye(3), rtol=1e-15)


def test_jittered_cholesky_rank_one():
    v = np.array([[1.0], [1.0]])
    A = v @ v.T
    L, jitter = numerics.jittered_cholesky(A)
    assert jitter in [s * 1.0 for s in numerics.JITTER_SCHEDULE]
    np.testing.assert_allclose(L @ L.T, A + jitter * np.eye(2), atol=1e-12)


def test_jittered_cholesky_zero_matrix():
    L, jitter = numerics.jittered_cholesky(np.zeros((2, 2)))
    np.testing.assert_allclose(L, math.sqrt(jitter) * np.eye(2))
    np.testing.assert_allclose(L @ L.T, jitter * np.eye(2))


def test_jittered_cholesky_scale_free():
    _, j1 = numerics.jittered_cholesky(np.eye(2))
    _, j2 = numerics.jittered_cholesky(1e4 * np.eye(2))
    assert j2 == pytest.approx(1e4 * j1)


def test_jittered_cholesky_exhausted():
    with pytest.raises(NotPositiveDefinite):
        numerics.jittered_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_solve_lower_identity(rng):
    B = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(numerics.solve_lower(np.eye(3), B), B)


def test_solve_lower_by_hand():
    X = numerics.solve_lower([[2.0, 0.0], [1.0, 1.0]], [[2.0], [2.0]])
    np.testing.assert_allclose(X, [[1.0], [1.0]])


def test_solve_lower_residual(rng):
    L = numerics.cholesky(random_spd(rng, 5))
    B = rng.normal(size=(5, 3))
    X = numerics.solve_lower(L, B)
    assert np.linalg.norm(L @ X - B) / np.linalg.norm(B) < 1e-10


def test_solve_lower_shape_mismatch():
    with pytest.raises(ValueError):
        numerics.solve_lower(np.eye(3), np.ones((2, 1)))


def test_log_det_identity():
    assert numerics.log_det_from_chol(np.eye(4)) == 0.0


def test_log_det_diag():
    assert numerics.log_det_from_chol(np.diag([2.0, 3.0])) == pytest.approx(math.log(36.0), rel=1e-14)


def test_log_det_matches_eigenvalues(rng):
    A = random_spd(rng, 4)
    expected = np.sum(np.log(np.linalg.eigvalsh(A)))
    assert numerics.log_det_from_chol(numerics.cholesky(A)) == pytest.approx(expected, rel=1e-8, abs=1e-8)


def test_rng_determinism():
    np.testing.assert_array_equal(Rng(3).normal((4, 5)), Rng(3).normal((4, 5)))


def test_rng_golden_stream():
    # PCG64 + ziggurat normals; must never change across releases
    np.testing.assert_array_equal(
        Rng(42).normal(5),
        [0.30471707975443135, -1.0399841062404955, 0.7504511958064572, 0.9405647163912139, -1.9510351886538364],
    )
    r = Rng(7)
    r.normal(3)
    np.testing.assert_array_equal(r.normal(2), [-0.8905918387572742, -0.45467078517172255])


def test_rng_moments():
    z = numerics.sample_standard_normal(Rng(0), 100_000)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.05


def test_rng_empty_shape():
    assert numerics.sample_standard_normal(Rng(0), (0, 4)).shape == (0, 4)


def test_rng_rejects_bad_seed():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(2**64)


def test_as_matrix_rejects_nan():
    with pytest.raises(ValueError):
        numerics.as_matrix([[1.0, np.nan]])
