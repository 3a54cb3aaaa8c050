"""Reference computations used to check the main implementation.

Nothing here goes through the autodiff graph or the layer classes; kernel
formulas are re-derived from the hyperparameter values so that a bug in one
place cannot hide in the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from hybridbnn import numerics
from hybridbnn.numerics import Rng


@dataclass
class ExactGPResult:
    mean: np.ndarray
    variance: np.ndarray
    log_marginal_likelihood: float


def kernel_eval(kernel, A, B) -> np.ndarray:
    """Kernel matrix from the kernel's hyperparameter values, computed with explicit loops-free numpy."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    h = {k: np.asarray(v, dtype=np.float64) for k, v in kernel.hyperparameters().items()}
    if kernel.name == "squared_exponential":
        diff = A[:, None, :] - B[None, :, :]
        r2 = np.sum(diff ** 2, axis=-1)
        return h["variance"] * np.exp(-r2 / (2.0 * h["lengthscale"] ** 2))
    if kernel.name == "polynomial":
        c = h.get("offset", 0.0)
        return h["variance"] * (A @ B.T + c) ** kernel.degree
    if kernel.name == "arc_cosine":
        wv, bv = h["weight_variance"], h["bias_variance"]
        s = wv * np.einsum("id,jd->ij", A, B) + bv
        sa = wv * np.sum(A * A, axis=1) + bv
        sb = wv * np.sum(B * B, axis=1) + bv
        norm = np.sqrt(np.outer(sa, sb))
        theta = np.arccos(np.clip(s / norm, -1.0, 1.0))
        if kernel.order == 0:
            return h["variance"] * (1.0 - theta / math.pi)
        return h["variance"] * norm * (np.sin(theta) + (math.pi - theta) * np.cos(theta)) / math.pi
    raise ValueError(f"no oracle for kernel {kernel.name!r}")


def exact_gp_regression(kernel, X, y, noise_variance: float, X_star) -> ExactGPResult:
    """Conjugate GP regression with zero prior mean and Gaussian noise."""
    if not noise_variance > 0:
        raise ValueError("noise variance must be positive")
    X = numerics.as_matrix(X)
    X_star = numerics.as_matrix(X_star)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    K = kernel_eval(kernel, X, X) + noise_variance * np.eye(n)
    K = 0.5 * (K + K.T)
    L = numerics.cholesky(K)
    alpha = numerics.solve_upper_t(L, numerics.solve_lower(L, y[:, None]))[:, 0]
    Ks = kernel_eval(kernel, X_star, X)
    mean = Ks @ alpha
    V = numerics.solve_lower(L, Ks.T)
    prior_var = np.diag(kernel_eval(kernel, X_star, X_star)) if X_star.shape[0] else np.zeros(0)
    var = np.maximum(prior_var - np.sum(V * V, axis=0), 0.0)
    lml = -0.5 * y @ alpha - 0.5 * numerics.log_det_from_chol(L) - 0.5 * n * math.log(2.0 * math.pi)
    return ExactGPResult(mean, var, float(lml))


def mc_kl(sampler_q: Callable[[Rng, int], np.ndarray], logpdf_q: Callable, logpdf_p: Callable,
          n_samples: int, rng: Rng) -> tuple[float, float]:
    """Monte-Carlo ``KL(q || p)``: mean and standard error of ``log q - log p`` under ``q``."""
    if n_samples < 1000:
        raise ValueError("use at least 1000 samples")
    draws = sampler_q(rng, n_samples)
    d = logpdf_q(draws) - logpdf_p(draws)
    return float(np.mean(d)), float(np.std(d, ddof=1) / math.sqrt(n_samples))


def gaussian_logpdf(mean, cov) -> Callable[[np.ndarray], np.ndarray]:
    """Row-wise multivariate normal log-density."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    L = numerics.cholesky(cov)
    logdet = numerics.log_det_from_chol(L)
    d = mean.size

    def logpdf(x):
        z = numerics.solve_lower(L, (np.atleast_2d(x) - mean).T)
        return -0.5 * (np.sum(z * z, axis=0) + logdet + d * math.log(2.0 * math.pi))

    return logpdf


def gaussian_sampler(mean, cov) -> Callable[[Rng, int], np.ndarray]:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    L = numerics.cholesky(np.atleast_2d(np.asarray(cov, dtype=np.float64)))
    return lambda rng, n: mean + rng.normal((n, mean.size)) @ L.T


def gaussian_kl_mc(mean_q, cov_q, mean_p, cov_p, n_samples: int, rng: Rng) -> tuple[float, float]:
    return mc_kl(gaussian_sampler(mean_q, cov_q), gaussian_logpdf(mean_q, cov_q),
                 gaussian_logpdf(mean_p, cov_p), n_samples, rng)


def gauss_hermite_expectation(f: Callable, mean: float, variance: float, nodes: int = 20) -> float:
    """``E[f(t)]`` for ``t ~ N(mean, variance)`` by Gauss-Hermite quadrature."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    x, w = np.polynomial.hermite.hermgauss(nodes)
    t = mean + math.sqrt(2.0 * variance) * x
    return float(np.sum(w * np.asarray(f(t), dtype=np.float64)) / math.sqrt(math.pi))


def finite_diff_grad(loss: Callable[[], float], params, step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss()`` on every unconstrained entry of ``params``.

    ``params`` are objects with a mutable ``value`` array (``Parameter``);
    values are restored afterwards.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        base = p.value.copy()
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += step
            p.value = plus
            f_plus = float(loss())
            minus = base.copy()
            minus[idx] -= step
            p.value = minus
            f_minus = float(loss())
            g[idx] = (f_plus - f_minus) / (2.0 * step)
        p.value = base
        grads.append(g)
    return grads


def fit_exact_gp(X, y, lengthscales=None, noises=None, variances=None):
    """Grid-search SE hyperparameters by log marginal likelihood.

    Returns ``(result_at_X, hyper)`` where ``hyper`` holds the winning values.
    """
    from hybridbnn.kernels import SquaredExponential

    lengthscales = np.geomspace(0.02, 1.0, 25) if lengthscales is None else lengthscales
    noises = np.geomspace(1e-3, 0.5, 25) if noises is None else noises
    variances = (0.1, 0.3, 1.0, 3.0) if variances is None else variances
    best = None
    for var in variances:
        for ell in lengthscales:
            k = SquaredExponential(var, ell)
            for s2 in noises:
                try:
                    res = exact_gp_regression(k, X, y, s2, X)
                except numerics.NotPositiveDefinite:
                    continue
                if best is None or res.log_marginal_likelihood > best[0].log_marginal_likelihood:
                    best = (res, {"variance": float(var), "lengthscale": float(ell), "noise": float(s2)})
    return best
