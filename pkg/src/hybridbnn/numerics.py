"""Dense linear algebra and seeded sampling.

Matrices are plain ``float64`` numpy arrays (C order). The helpers here are
the only place that talks to LAPACK; everything else goes through them.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

JITTER_SCHEDULE = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return np.ascontiguousarray(a)


def _check_square_symmetric(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(np.max(np.abs(a)), 1.0) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises
    ------
    NotPositiveDefinite
        If any pivot is <= 0. Callers usually retry via :func:`jittered_cholesky`.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_square_symmetric(a)
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if a.shape[0] and np.min(np.diag(L)) <= 0.0:
        raise NotPositiveDefinite("non-positive pivot")
    return L


def jitter_scale(a: np.ndarray) -> float:
    """Mean diagonal magnitude; falls back to 1 for an all-zero diagonal."""
    if a.shape[0] == 0:
        return 1.0
    s = float(np.mean(np.abs(np.diag(a))))
    return s if s > 0.0 else 1.0


def jittered_cholesky(a) -> tuple[np.ndarray, float]:
    """Cholesky of ``a + jitter * I`` with the smallest jitter that works.

    Jitter is always added, starting at ``1e-6 * mean(diag(a))`` and growing
    tenfold up to ``1e-2 * mean(diag(a))``.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_square_symmetric(a)
    scale = jitter_scale(a)
    eye = np.eye(a.shape[0])
    for rel in JITTER_SCHEDULE:
        jitter = rel * scale
        try:
            return cholesky(a + jitter * eye), jitter
        except NotPositiveDefinite:
            continue
    raise NotPositiveDefinite(
        f"matrix not positive definite even with jitter {JITTER_SCHEDULE[-1] * scale:.3g}"
    )


def solve_lower(L, B) -> np.ndarray:
    """Solve ``L X = B`` for lower-triangular ``L`` by forward substitution."""
    L = np.asarray(L, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    vector = B.ndim == 1
    if vector:
        B = B[:, None]
    if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[1] != B.shape[0]:
        raise ValueError(f"cannot solve with L {L.shape} and B {B.shape}")
    X = solve_triangular(L, B, lower=True, check_finite=False)
    return X[:, 0] if vector else X


def solve_upper_t(L, B) -> np.ndarray:
    """Solve ``L^T X = B`` for lower-triangular ``L``."""
    L = np.asarray(L, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if L.shape[1] != B.shape[0]:
        raise ValueError(f"cannot solve with L {L.shape} and B {B.shape}")
    return solve_triangular(L, B, lower=True, trans="T", check_finite=False)


def log_det_from_chol(L) -> float:
    """``log det(L L^T) = 2 * sum(log diag(L))``."""
    return 2.0 * float(np.sum(np.log(np.diag(np.asarray(L)))))


class Rng:
    """Seeded standard-normal source.

    Backed by numpy's PCG64 bit generator with the ``Generator`` ziggurat
    normal sampler, both of which are stable across platforms and numpy
    releases. The stream is fixed by ``seed`` and the sequence of calls.
    """

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.draws = 0

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.draws += out.size
        return out

    def uniform(self, low=0.0, high=1.0, size=None):
        out = self._gen.uniform(low, high, size)
        self.draws += np.size(out)
        return out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self) -> "Rng":
        """Independent child stream derived deterministically from this one."""
        return Rng(int(self._gen.integers(0, 2**63)))


def sample_standard_normal(rng: Rng, shape) -> np.ndarray:
    return rng.normal(shape)
