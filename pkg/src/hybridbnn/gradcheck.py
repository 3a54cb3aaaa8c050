"""Finite-difference check of every layer, kernel and loss gradient."""

from __future__ import annotations

from typing import Callable

import numpy as np

from hybridbnn import autodiff as ad
from hybridbnn import oracle
from hybridbnn.gp_layer import GPLayer
from hybridbnn.kernels import ArcCosine, Polynomial, SquaredExponential
from hybridbnn.nn_layers import (
    DenseLayer,
    GaussianHead,
    GaussianLikelihood,
    VariationalDenseLayer,
    head_negative_loglik,
)
from hybridbnn.numerics import Rng
from hybridbnn.training import Model

TOLERANCE = 1e-4


def relative_error(analytic, numeric) -> float:
    worst = 0.0
    for a, f in zip(analytic, numeric):
        scale = max(np.max(np.abs(f), initial=0.0), np.max(np.abs(a), initial=0.0), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - f), initial=0.0)) / scale)
    return worst


def check(loss: Callable[[], ad.Node], params) -> float:
    """Max relative error between backward() and central differences."""
    params = list(params)
    analytic = ad.grad(loss, params)
    numeric = oracle.finite_diff_grad(lambda: loss().value, params)
    return relative_error(analytic, numeric)


def _projection(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _gp_layer(rng, kernel, n_in=1, M=3, whiten=False):
    Z = rng.normal(size=(M, n_in)) * 1.5
    layer = GPLayer(kernel, Z, whiten=whiten)
    layer.q_mu.assign(rng.normal(size=(M, 1)))
    layer.q_sqrt[0].assign(np.tril(rng.normal(size=(M, M))) * 0.5)
    return layer


def components(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)

    def dense():
        layer = DenseLayer(3, 3, "relu", Rng(seed))
        layer.b.assign(rng.normal(size=3))
        H = rng.normal(size=(4, 3))
        P = _projection(rng, (4, 3))
        return check(lambda: ad.reduce_sum(layer(H) * P), layer.parameters())

    def vdense():
        layer = VariationalDenseLayer(3, 2, "relu", kl_weight=0.1, rng=Rng(seed))
        layer.W_rho.assign(rng.normal(size=(2, 3)))
        layer.b_mean.assign(rng.normal(size=2))
        H = rng.normal(size=(4, 3))
        P = _projection(rng, (4, 2))
        return check(lambda: ad.reduce_sum(layer.sample_forward(H, Rng(seed + 1)) * P) + layer.kl(),
                     layer.parameters())

    def kernel_check(kernel):
        def run():
            X = rng.normal(size=(4, 2))
            X2 = rng.normal(size=(3, 2))
            P = _projection(rng, (4, 3))
            Q = _projection(rng, (4, 4))
            return check(lambda: ad.reduce_sum(kernel.matrix(X, X2) * P) + ad.reduce_sum(kernel.matrix(X) * Q)
                         + ad.reduce_sum(kernel.diag(X)), kernel.parameters())
        return run

    def gp_layer(whiten):
        def run():
            layer = _gp_layer(rng, SquaredExponential(1.2, 0.9), whiten=whiten)
            X = rng.normal(size=(4, 1))
            P = _projection(rng, (4, 1))
            Q = _projection(rng, (4, 1))

            def loss():
                marg = layer.predict_marginals(X)
                return ad.reduce_sum(marg.mean * P) + ad.reduce_sum(marg.variance * Q) + layer.kl_to_prior()

            return check(loss, layer.parameters())
        return run

    def elbo():
        X = rng.normal(size=(4, 1))
        y = rng.normal(size=4)
        layer = _gp_layer(rng, SquaredExponential(1.0, 1.1), M=2)
        model = Model([DenseLayer(1, 1, "linear", Rng(seed)), layer], likelihood=GaussianLikelihood(0.3),
                      loss="elbo", num_data=4, input_dim=1)
        return check(lambda: model.loss_node(X, y, Rng(seed)), model.parameters())

    def nll():
        X = rng.normal(size=(5, 2))
        y = rng.normal(size=5)
        model = Model([DenseLayer(2, 3, "relu", Rng(seed)), VariationalDenseLayer(3, 2, kl_weight=0.2, rng=Rng(seed)),
                       GaussianHead()], loss="nll", num_data=5, input_dim=2)
        return check(lambda: model.loss_node(X, y, Rng(seed)), model.parameters())

    def head():
        raw = ad.Parameter("raw", rng.normal(size=(5, 2)))
        y = rng.normal(size=5)
        return check(lambda: head_negative_loglik(GaussianHead(), raw, y), [raw])

    def likelihood():
        lik = GaussianLikelihood(0.4)
        m = ad.Parameter("m", rng.normal(size=(5, 1)))
        v = ad.Parameter.positive("v", rng.uniform(0.1, 1.0, size=(5, 1)))
        y = rng.normal(size=5)
        return check(lambda: lik.variational_expectation(m, v.view(), y), [m, v, *lik.parameters()])

    def mse():
        X = rng.normal(size=(5, 2))
        y = rng.normal(size=5)
        model = Model([DenseLayer(2, 3, "relu", Rng(seed)), DenseLayer(3, 1, "linear", Rng(seed + 1))],
                      loss="mse", num_data=5, input_dim=2)
        return check(lambda: model.loss_node(X, y), model.parameters())

    def linalg():
        B = ad.Parameter("B", rng.normal(size=(4, 4)))
        C = ad.Parameter("C", rng.normal(size=(4, 2)))

        def loss():
            A = B @ B.T + 4.0 * np.eye(4)
            L = ad.cholesky(A)
            X = ad.solve_lower(L, C)
            Y = ad.solve_lower_t(L, C)
            return ad.log_det_from_chol(L) + ad.reduce_sum(ad.square(X)) + ad.reduce_sum(Y)

        return check(loss, [B, C])

    return {
        "dense": dense,
        "vdense": vdense,
        "se_kernel": kernel_check(SquaredExponential(0.8, 1.3)),
        "arccos_kernel_0": kernel_check(ArcCosine(0, 1.1, 0.7, 0.4)),
        "arccos_kernel_1": kernel_check(ArcCosine(1, 1.1, 0.7, 0.4)),
        "poly_kernel": kernel_check(Polynomial(3, 0.8, 0.6)),
        "gp_layer": gp_layer(False),
        "gp_layer_whitened": gp_layer(True),
        "linalg": linalg,
        "likelihood": likelihood,
        "head": head,
        "elbo": elbo,
        "nll": nll,
        "mse": mse,
    }


def run(seed: int = 0, tolerance: float = TOLERANCE, out=print) -> bool:
    """Run every component, print one line each, and return whether all pass."""
    ok = True
    for name, fn in components(seed).items():
        err = fn()
        passed = err < tolerance
        ok &= passed
        out(f"{name:20s} max_rel_err={err:.3e}  {'PASS' if passed else 'FAIL'}")
    return ok
