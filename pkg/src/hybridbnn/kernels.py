"""Covariance functions with trainable positive hyperparameters.

All kernels share one interface: ``matrix(X, X2)`` and ``diag(X)`` return
graph nodes so hyperparameter gradients flow through them. Use ``.value`` on
the result for a plain array.
"""

from __future__ import annotations

import math

import numpy as np

from hybridbnn import autodiff as ad
from hybridbnn.autodiff import Node, Parameter


class Kernel:
    name = "kernel"

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def matrix(self, X, X2=None) -> Node:
        raise NotImplementedError

    def diag(self, X) -> Node:
        raise NotImplementedError

    def copy(self) -> "Kernel":
        """Independent kernel with the same hyperparameter values."""
        raise NotImplementedError

    def hyperparameters(self) -> dict:
        return {p.name: p.constrained().tolist() for p in self.parameters()}

    @staticmethod
    def _check(X, X2):
        X = ad.const(X)
        X2 = X if X2 is None else ad.const(X2)
        if X.ndim != 2 or X2.ndim != 2 or X.shape[1] != X2.shape[1]:
            raise ValueError(f"kernel inputs need matching feature dims, got {X.shape} and {X2.shape}")
        return X, X2


def square_distance(X: Node, X2: Node) -> Node:
    """Pairwise ``|x - x'|^2`` via the norm expansion, clamped at zero."""
    n1 = ad.reduce_sum(ad.square(X), axis=1, keepdims=True)
    n2 = ad.reduce_sum(ad.square(X2), axis=1, keepdims=True)
    d = n1 + n2.T - 2.0 * (X @ X2.T)
    return ad.relu(d)


class SquaredExponential(Kernel):
    """``variance * exp(-|x - x'|^2 / (2 lengthscale^2))`` with one shared lengthscale."""

    name = "squared_exponential"

    def __init__(self, variance: float = 1.0, lengthscale: float = 1.0):
        self.variance = Parameter.positive("variance", variance)
        self.lengthscale = Parameter.positive("lengthscale", lengthscale)

    def parameters(self):
        return [self.variance, self.lengthscale]

    def matrix(self, X, X2=None):
        same = X2 is None
        X, X2 = self._check(X, X2)
        ell = self.lengthscale.view()
        r2 = square_distance(X / ell, X2 / ell)
        if same:
            r2 = r2 * (1.0 - np.eye(X.shape[0]))
        K = self.variance.view() * ad.exp(-0.5 * r2)
        if same:
            # the norm expansion leaves rounding asymmetry; symmetrize exactly
            K = 0.5 * (K + K.T)
        return K

    def diag(self, X):
        X = ad.const(X)
        return self.variance.view() * np.ones(X.shape[0])

    def copy(self):
        return SquaredExponential(float(self.variance.constrained()), float(self.lengthscale.constrained()))


class ArcCosine(Kernel):
    """Arc-cosine kernel of order 0 or 1 on a weighted inner product.

    With ``s(x, x') = weight_variance * x.x' + bias_variance`` and
    ``theta = arccos(s(x, x') / sqrt(s(x, x) s(x', x')))``::

        order 0: variance * (1 - theta / pi)
        order 1: variance * sqrt(s(x,x) s(x',x')) * (sin theta + (pi - theta) cos theta) / pi
    """

    name = "arc_cosine"

    def __init__(self, order: int = 0, variance: float = 1.0, weight_variance: float = 1.0,
                 bias_variance: float = 1.0):
        if order not in (0, 1):
            raise ValueError("arc-cosine order must be 0 or 1")
        self.order = order
        self.variance = Parameter.positive("variance", variance)
        self.weight_variance = Parameter.positive("weight_variance", weight_variance)
        self.bias_variance = Parameter.positive("bias_variance", bias_variance)

    def parameters(self):
        return [self.variance, self.weight_variance, self.bias_variance]

    def _self_inner(self, X: Node) -> Node:
        return self.weight_variance.view() * ad.reduce_sum(ad.square(X), axis=1) + self.bias_variance.view()

    def matrix(self, X, X2=None):
        same = X2 is None
        X, X2 = self._check(X, X2)
        s = self.weight_variance.view() * (X @ X2.T) + self.bias_variance.view()
        n1 = ad.sqrt(self._self_inner(X))
        n2 = ad.sqrt(self._self_inner(X2))
        norms = ad.reshape(n1, (-1, 1)) * ad.reshape(n2, (1, -1))
        cos_t = ad.clip(s / norms, -1.0, 1.0)
        if same:
            # arccos is ill-conditioned at 1; pin the self-similarity exactly
            eye = np.eye(X.shape[0])
            cos_t = cos_t * (1.0 - eye) + eye
        theta = ad.arccos(cos_t)
        if self.order == 0:
            K = self.variance.view() * (1.0 - theta * (1.0 / math.pi))
        else:
            J = ad.sin(theta) + (math.pi - theta) * cos_t
            K = self.variance.view() * norms * J * (1.0 / math.pi)
        if same:
            K = 0.5 * (K + K.T)
        return K

    def diag(self, X):
        X = ad.const(X)
        if self.order == 0:
            return self.variance.view() * np.ones(X.shape[0])
        return self.variance.view() * self._self_inner(X)

    def copy(self):
        return ArcCosine(self.order, float(self.variance.constrained()),
                         float(self.weight_variance.constrained()), float(self.bias_variance.constrained()))


class Polynomial(Kernel):
    """``variance * (x.x' + offset)^degree``.

    An offset of exactly 0 is held fixed (softplus cannot reach zero).
    """

    name = "polynomial"

    def __init__(self, degree: int = 3, offset: float = 1.0, variance: float = 1.0):
        if int(degree) != degree or degree < 1:
            raise ValueError("polynomial degree must be a positive integer")
        if offset < 0:
            raise ValueError("polynomial offset must be nonnegative")
        self.degree = int(degree)
        self.offset = Parameter.positive("offset", offset) if offset > 0 else None
        self.variance = Parameter.positive("variance", variance)

    def parameters(self):
        return [self.variance] if self.offset is None else [self.offset, self.variance]

    def _offset(self):
        return 0.0 if self.offset is None else self.offset.view()

    def matrix(self, X, X2=None):
        same = X2 is None
        X, X2 = self._check(X, X2)
        K = self.variance.view() * ad.power(X @ X2.T + self._offset(), self.degree)
        if same:
            K = 0.5 * (K + K.T)
        return K

    def diag(self, X):
        X = ad.const(X)
        inner = ad.reduce_sum(ad.square(X), axis=1)
        return self.variance.view() * ad.power(inner + self._offset(), self.degree)

    def copy(self):
        offset = 0.0 if self.offset is None else float(self.offset.constrained())
        return Polynomial(self.degree, offset, float(self.variance.constrained()))


KERNELS = {
    "squared_exponential": SquaredExponential,
    "arc_cosine": ArcCosine,
    "polynomial": Polynomial,
}


def make_kernel(name: str, **hyper) -> Kernel:
    try:
        cls = KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None
    return cls(**hyper)


def kernel_matrix(k: Kernel, X, X2=None) -> np.ndarray:
    return k.matrix(X, X2).value


def kernel_diag(k: Kernel, X) -> np.ndarray:
    return k.diag(X).value
