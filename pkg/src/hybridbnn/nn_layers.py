"""Dense, weight-variational dense, and Gaussian output layers."""

from __future__ import annotations

import math

import numpy as np

from hybridbnn import autodiff as ad
from hybridbnn.autodiff import Node, Parameter
from hybridbnn.numerics import Rng

ACTIVATIONS = ("relu", "linear")
HEAD_MIN_STD = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def _activate(pre: Node, activation: str) -> Node:
    return ad.relu(pre) if activation == "relu" else pre


def _check_activation(activation: str) -> str:
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; choose from {ACTIVATIONS}")
    return activation


def _he_init(rng: Rng, d_out: int, d_in: int) -> np.ndarray:
    return rng.normal((d_out, d_in)) * math.sqrt(2.0 / d_in)


def _glorot_init(rng: Rng, d_out: int, d_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, (d_out, d_in))


class DenseLayer:
    """``activation(H W^T + b)`` with ``W`` of shape (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, activation: str = "linear", rng: Rng | None = None):
        self._activation = _check_activation(activation)
        rng = rng or Rng(0)
        self.W = Parameter("W", _glorot_init(rng, d_out, d_in))
        self.b = Parameter("b", np.zeros(d_out))

    @property
    def activation(self) -> str:
        return self._activation

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def __call__(self, H) -> Node:
        H = ad.const(H)
        if H.ndim != 2 or H.shape[1] != self.input_dim:
            raise ValueError(f"dense layer expects width {self.input_dim}, got shape {H.shape}")
        return _activate(H @ self.W.T + self.b, self._activation)

    def describe(self) -> dict:
        return {"type": "dense", "units": self.output_dim, "activation": self._activation}


class VariationalDenseLayer:
    """Dense layer with a factorized Gaussian posterior over weights and biases.

    The prior is ``N(0, 1)`` on every entry. Posterior standard deviations are
    ``softplus(rho)``. One weight sample is drawn per forward call.
    """

    def __init__(self, d_in: int, d_out: int, activation: str = "linear", kl_weight: float = 1.0,
                 rng: Rng | None = None, init_std: float = 0.01):
        self._activation = _check_activation(activation)
        if not kl_weight > 0:
            raise ValueError("kl_weight must be positive")
        self.kl_weight = float(kl_weight)
        rng = rng or Rng(0)
        rho = float(ad.inverse_softplus(init_std))
        self.W_mean = Parameter("W_mean", _he_init(rng, d_out, d_in))
        self.W_rho = Parameter("W_rho", np.full((d_out, d_in), rho), "softplus")
        self.b_mean = Parameter("b_mean", np.zeros(d_out))
        self.b_rho = Parameter("b_rho", np.full(d_out, rho), "softplus")

    @property
    def activation(self) -> str:
        return self._activation

    @property
    def input_dim(self) -> int:
        return self.W_mean.shape[1]

    @property
    def output_dim(self) -> int:
        return self.W_mean.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W_mean, self.W_rho, self.b_mean, self.b_rho]

    def _check(self, H) -> Node:
        H = ad.const(H)
        if H.ndim != 2 or H.shape[1] != self.input_dim:
            raise ValueError(f"variational dense layer expects width {self.input_dim}, got shape {H.shape}")
        return H

    def sample_forward(self, H, rng: Rng) -> Node:
        H = self._check(H)
        W = self.W_mean + self.W_rho.view() * rng.normal(self.W_mean.shape)
        b = self.b_mean + self.b_rho.view() * rng.normal(self.b_mean.shape)
        return _activate(H @ W.T + b, self._activation)

    def mean_forward(self, H) -> Node:
        H = self._check(H)
        return _activate(H @ self.W_mean.T + self.b_mean, self._activation)

    def kl(self) -> Node:
        """Unweighted ``sum KL(N(mu, sigma^2) || N(0, 1))`` over all entries."""
        total = 0.0
        for mean, rho in ((self.W_mean, self.W_rho), (self.b_mean, self.b_rho)):
            var = ad.square(rho.view())
            total = total + 0.5 * ad.reduce_sum(var + ad.square(mean) - 1.0 - ad.log(var))
        return total

    def describe(self) -> dict:
        return {"type": "variational_dense", "units": self.output_dim, "activation": self._activation,
                "kl_weight": self.kl_weight}


class GaussianHead:
    """Reads a two-column input as ``[mean, raw_scale]``; std = softplus(raw) + 1e-6."""

    input_dim = 2
    output_dim = 1

    def parameters(self) -> list[Parameter]:
        return []

    def __call__(self, raw) -> tuple[Node, Node]:
        raw = ad.const(raw)
        if raw.ndim != 2 or raw.shape[1] != 2:
            raise ValueError(f"Gaussian head needs exactly 2 input columns, got shape {raw.shape}")
        return raw[:, 0:1], ad.softplus(raw[:, 1:2]) + HEAD_MIN_STD

    def describe(self) -> dict:
        return {"type": "gaussian_head"}


class GaussianLikelihood:
    """Homoscedastic Gaussian observation noise with trainable variance."""

    def __init__(self, variance: float = 1e-3):
        self.variance = Parameter.positive("noise_variance", variance)

    def parameters(self) -> list[Parameter]:
        return [self.variance]

    def variational_expectation(self, mean, var, y) -> Node:
        """``sum_n E_{f ~ N(mean_n, var_n)} log N(y_n | f, noise)``."""
        mean, var = ad.const(mean), ad.const(var)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        if mean.shape != y.shape or var.shape != y.shape:
            raise ValueError(f"shape mismatch: mean {mean.shape}, var {var.shape}, y {y.shape}")
        s2 = self.variance.view()
        per_point = -0.5 * LOG_2PI - 0.5 * ad.log(s2) - (ad.square(y - mean) + var) / (2.0 * s2)
        return ad.reduce_sum(per_point)

    def describe(self) -> dict:
        return {"type": "gaussian_likelihood", "variance": float(self.variance.constrained())}


def dense_forward(layer: DenseLayer, H) -> Node:
    return layer(H)


def vdense_forward_sample(layer: VariationalDenseLayer, H, rng: Rng) -> Node:
    return layer.sample_forward(H, rng)


def vdense_kl(layer: VariationalDenseLayer) -> Node:
    return layer.kl()


def head_negative_loglik(head: GaussianHead, raw, y) -> Node:
    """Mean over rows of ``-log N(y_i | mu_i, sigma_i^2)``."""
    mu, sigma = head(raw)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y.shape != mu.shape:
        raise ValueError(f"target shape {y.shape} does not match predictions {mu.shape}")
    nll = 0.5 * LOG_2PI + ad.log(sigma) + ad.square(y - mu) / (2.0 * ad.square(sigma))
    return ad.reduce_mean(nll)


def likelihood_variational_expectation(lik: GaussianLikelihood, marg, y) -> Node:
    if marg.mean.shape[1] != 1:
        raise ValueError("variational expectation needs a single latent output")
    return lik.variational_expectation(marg.mean, marg.variance, y)
