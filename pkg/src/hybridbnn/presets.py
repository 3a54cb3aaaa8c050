"""Model lineup: a plain network, two weight-uncertain hybrids and three GP hybrids."""

from __future__ import annotations

import numpy as np

from hybridbnn.gp_layer import GPLayer
from hybridbnn.kernels import make_kernel
from hybridbnn.nn_layers import DenseLayer, GaussianHead, GaussianLikelihood, VariationalDenseLayer
from hybridbnn.numerics import Rng
from hybridbnn.training import Model

PRESETS = ("dnn", "hbnn-replace", "hbnn-append", "hfbnn", "hfbnn-deep", "hfbnn-arccosine")
HIDDEN = 100
NOISE_INIT = 1e-3


def _trunk(d_in: int, rng: Rng) -> list:
    return [DenseLayer(d_in, HIDDEN, "relu", rng), DenseLayer(HIDDEN, HIDDEN, "relu", rng)]


def inducing_grid(X, num_inducing: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.linspace(X.min(), X.max(), num_inducing).reshape(-1, 1)


def build(name: str, X, seed: int = 0, kernel: str | None = None, kernel_params: dict | None = None,
          num_inducing: int = 20) -> Model:
    """Construct preset ``name`` for inputs ``X`` (N x D); weights are seeded by ``seed``."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    if num_inducing < 1:
        raise ValueError("num_inducing must be positive")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    rng = Rng(seed)
    layers = _trunk(d, rng)

    if name == "dnn":
        layers.append(DenseLayer(HIDDEN, 1, "linear", rng))
        return Model(layers, loss="mse", num_data=n, input_dim=d)

    if name.startswith("hbnn"):
        width = HIDDEN
        if name == "hbnn-append":
            layers.append(DenseLayer(HIDDEN, 1, "linear", rng))
            width = 1
        layers += [VariationalDenseLayer(width, 2, "linear", kl_weight=1.0 / n, rng=rng), GaussianHead()]
        return Model(layers, loss="nll", num_data=n, input_dim=d)

    kname = kernel or ("arc_cosine" if name == "hfbnn-arccosine" else "squared_exponential")
    Z = inducing_grid(X, num_inducing)
    layers.append(DenseLayer(HIDDEN, 1, "linear", rng))
    if name == "hfbnn-deep":
        layers.append(GPLayer(make_kernel(kname, **(kernel_params or {})), Z, mean_function="identity"))
    layers.append(GPLayer(make_kernel(kname, **(kernel_params or {})), Z))
    return Model(layers, likelihood=GaussianLikelihood(NOISE_INIT), loss="elbo", num_data=n, input_dim=d)
