"""Sparse variational Gaussian-process layer.

The layer holds inducing inputs ``Z`` (M x D), a Gaussian ``q(u) = N(m_u, S_uu)``
per latent output and a kernel shared by all outputs. ``S_uu`` is stored as a
lower-triangular factor whose diagonal is softplus-transformed, so it is
positive definite for any unconstrained value.

Given inputs ``X`` the predictive marginals are::

    mean = mu(X) + K_xu K_uu^-1 (m_u - mu(Z))
    var  = k(x, x) - k_xu K_uu^-1 (K_uu - S_uu) K_uu^-1 k_ux

computed through ``A = L^-1 K_ux`` and ``B = L^-T A = K_uu^-1 K_ux`` with
``L`` the jittered Cholesky factor of ``K_uu``.

With ``whiten=True`` the stored parameters describe ``v = L^-1 (u - mu(Z))``
instead, so ``m_u = mu(Z) + L m_v`` and ``S_uu = L S_v L^T``. Both forms give
the same predictive; the whitened one is far better conditioned for gradient
descent when inducing points crowd together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hybridbnn import autodiff as ad
from hybridbnn import numerics
from hybridbnn.autodiff import Node, Parameter
from hybridbnn.kernels import Kernel
from hybridbnn.numerics import Rng

VARIANCE_FLOOR = 1e-12


@dataclass
class GaussianMarginals:
    """Per-point predictive mean and variance (both N x P graph nodes)."""

    mean: Node
    variance: Node


class GPLayer:
    """Multi-output SVGP layer with independent outputs sharing kernel and ``Z``.

    Parameters
    ----------
    kernel : Kernel
        Covariance function; its hyperparameters are trained with the layer.
    Z : array, shape (M, D_in)
        Initial inducing inputs.
    num_latent : int
        Number of independent output GPs ``P``.
    mean_function : {"zero", "identity"}
        Prior mean applied to the layer input. ``"identity"`` needs
        ``D_in == num_latent``.
    whiten : bool
        Parameterize ``q`` relative to the prior's Cholesky factor.
    init_scale : float
        ``q`` starts as the prior shrunk by this factor in standard deviation.
    """

    def __init__(self, kernel: Kernel, Z, num_latent: int = 1, mean_function: str = "zero",
                 whiten: bool = False, init_scale: float = 0.1):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        if mean_function not in ("zero", "identity"):
            raise ValueError(f"unknown mean function {mean_function!r}")
        if mean_function == "identity" and Z.shape[1] != num_latent:
            raise ValueError("identity mean needs input width equal to num_latent")
        self.kernel = kernel
        self.mean_function = mean_function
        self.num_latent = int(num_latent)
        self.whiten = bool(whiten)
        self.Z = Parameter("Z", Z)
        M = Z.shape[0]
        if self.whiten:
            self.q_mu = Parameter("q_mu", np.zeros((M, self.num_latent)))
            L0 = np.eye(M)
        else:
            self.q_mu = Parameter("q_mu", self._prior_mean_value(Z))
            L0 = ad.jittered_cholesky(kernel.matrix(Z))[0].value
        self.q_sqrt = []
        for p in range(self.num_latent):
            raw = init_scale * L0
            raw[np.diag_indices(M)] = ad.inverse_softplus(np.diag(raw))
            self.q_sqrt.append(Parameter(f"q_sqrt_{p}", raw))
        self.clip_count = 0
        self.last_jitter = 0.0

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Z.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.Z, self.q_mu, *self.q_sqrt, *self.kernel.parameters()]

    # prior pieces -------------------------------------------------------------

    def _prior_mean_value(self, X: np.ndarray) -> np.ndarray:
        if self.mean_function == "zero":
            return np.zeros((X.shape[0], self.num_latent))
        return X.copy()

    def prior_mean(self, X) -> Node:
        X = ad.const(X)
        if self.mean_function == "zero":
            return ad.const(np.zeros((X.shape[0], self.num_latent)))
        return X

    def chol_kuu(self) -> Node:
        L, jitter = ad.jittered_cholesky(self.kernel.matrix(self.Z))
        self.last_jitter = jitter
        return L

    def q_factor(self, p: int) -> Node:
        raw = self.q_sqrt[p]
        return ad.strict_lower(raw) + ad.diag_embed(ad.softplus(ad.diag_part(raw)))

    def q_mean(self) -> np.ndarray:
        """``m_u`` (M x P) in the space of the inducing values."""
        if not self.whiten:
            return self.q_mu.value.copy()
        return self._prior_mean_value(self.Z.value) + self.chol_kuu().value @ self.q_mu.value

    def q_cov(self, p: int) -> np.ndarray:
        """``S_uu`` for output ``p``."""
        L = self.q_factor(p).value
        if self.whiten:
            L = self.chol_kuu().value @ L
        return L @ L.T

    def _assign_factor(self, p: int, L: np.ndarray) -> None:
        raw = np.tril(L).copy()
        raw[np.diag_indices_from(raw)] = ad.inverse_softplus(np.diag(raw))
        self.q_sqrt[p].assign(raw)

    def set_to_prior(self) -> None:
        """Make ``q(u)`` equal the prior ``N(mu(Z), K_uu)`` (jitter included)."""
        if self.whiten:
            self.q_mu.assign(np.zeros_like(self.q_mu.value))
            L = np.eye(self.num_inducing)
        else:
            self.q_mu.assign(self._prior_mean_value(self.Z.value))
            L = self.chol_kuu().value
        for p in range(self.num_latent):
            self._assign_factor(p, L)

    def set_q(self, mean, covs) -> None:
        """Set ``q(u)`` from an M x P mean and a list of P covariance matrices."""
        mean = np.asarray(mean, dtype=np.float64).reshape(self.num_inducing, self.num_latent)
        if self.whiten:
            Lk = self.chol_kuu().value
            self.q_mu.assign(numerics.solve_lower(Lk, mean - self._prior_mean_value(self.Z.value)))
        else:
            self.q_mu.assign(mean)
        for p, S in enumerate(covs):
            S = np.asarray(S, dtype=np.float64)
            if self.whiten:
                W = numerics.solve_lower(Lk, S)
                S = numerics.solve_lower(Lk, W.T)
                S = 0.5 * (S + S.T)
            self._assign_factor(p, numerics.cholesky(S))

    # predictions --------------------------------------------------------------

    def _check_input(self, X) -> Node:
        X = ad.const(X)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"GP layer expects inputs of width {self.input_dim}, got shape {X.shape}")
        return X

    def _floor(self, var: Node) -> Node:
        clipped = int(np.sum(var.value < VARIANCE_FLOOR))
        if clipped:
            self.clip_count += clipped
        return ad.clip(var, VARIANCE_FLOOR, np.inf)

    def predict_marginals(self, X) -> GaussianMarginals:
        X = self._check_input(X)
        L = self.chol_kuu()
        Kux = self.kernel.matrix(self.Z, X)
        A = ad.solve_lower(L, Kux)
        if self.whiten:
            B = A
            mean = self.prior_mean(X) + A.T @ self.q_mu
        else:
            B = ad.solve_lower_t(L, A)
            mean = self.prior_mean(X) + B.T @ (self.q_mu - self.prior_mean(self.Z))
        base = self.kernel.diag(X) - ad.reduce_sum(ad.square(A), axis=0)
        cols = []
        for p in range(self.num_latent):
            SB = self.q_factor(p).T @ B
            cols.append(ad.reshape(base + ad.reduce_sum(ad.square(SB), axis=0), (-1, 1)))
        var = cols[0] if len(cols) == 1 else ad.concat(cols, axis=1)
        return GaussianMarginals(mean, self._floor(var))

    def conditional_given_u(self, X, u_values) -> GaussianMarginals:
        """Marginals of ``f(X) | u`` for fixed inducing values ``u`` (M x P)."""
        X = self._check_input(X)
        u = ad.const(np.asarray(u_values, dtype=np.float64).reshape(self.num_inducing, self.num_latent)
                     if not isinstance(u_values, Node) else u_values)
        L = self.chol_kuu()
        A = ad.solve_lower(L, self.kernel.matrix(self.Z, X))
        B = ad.solve_lower_t(L, A)
        mean = self.prior_mean(X) + B.T @ (u - self.prior_mean(self.Z))
        var = self.kernel.diag(X) - ad.reduce_sum(ad.square(A), axis=0)
        var = ad.reshape(var, (-1, 1)) * np.ones((1, self.num_latent))
        return GaussianMarginals(mean, self._floor(var))

    def sample(self, X, rng: Rng) -> Node:
        """Reparameterized draw ``mean + sqrt(var) * eps`` from the marginals."""
        marg = self.predict_marginals(X)
        eps = rng.normal(marg.mean.shape)
        return marg.mean + ad.sqrt(marg.variance) * eps

    def kl_to_prior(self) -> Node:
        """``sum_p KL(N(m_p, S_p) || N(mu(Z), K_uu))`` in closed form."""
        M = self.num_inducing
        if self.whiten:
            # KL is invariant under the shared affine map u = mu + L v
            total = 0.5 * ad.reduce_sum(ad.square(self.q_mu))
            for p in range(self.num_latent):
                Ls = self.q_factor(p)
                total = total + 0.5 * (ad.reduce_sum(ad.square(Ls)) - M - ad.log_det_from_chol(Ls))
            return total
        L = self.chol_kuu()
        diff = ad.solve_lower(L, self.prior_mean(self.Z) - self.q_mu)
        logdet_k = ad.log_det_from_chol(L)
        total = 0.5 * ad.reduce_sum(ad.square(diff))
        for p in range(self.num_latent):
            Ls = self.q_factor(p)
            trace = ad.reduce_sum(ad.square(ad.solve_lower(L, Ls)))
            total = total + 0.5 * (trace - M + logdet_k - ad.log_det_from_chol(Ls))
        return total

    def __call__(self, X) -> GaussianMarginals:
        return self.predict_marginals(X)

    def describe(self) -> dict:
        return {
            "type": "gp",
            "kernel": self.kernel.name,
            "kernel_hyperparameters": self.kernel.hyperparameters(),
            "num_inducing": self.num_inducing,
            "num_latent": self.num_latent,
            "mean_function": self.mean_function,
            "whiten": self.whiten,
        }


def predict_marginals(layer: GPLayer, X) -> GaussianMarginals:
    return layer.predict_marginals(X)


def conditional_given_u(layer: GPLayer, X, u_values) -> GaussianMarginals:
    return layer.conditional_given_u(X, u_values)


def sample(layer: GPLayer, X, rng: Rng) -> Node:
    return layer.sample(X, rng)


def kl_to_prior(layer: GPLayer) -> Node:
    return layer.kl_to_prior()
