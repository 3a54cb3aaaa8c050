"""Model composition, losses, optimization and prediction."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from hybridbnn import autodiff as ad
from hybridbnn.autodiff import Node, Parameter
from hybridbnn.gp_layer import GaussianMarginals, GPLayer
from hybridbnn.nn_layers import (
    GaussianHead,
    GaussianLikelihood,
    VariationalDenseLayer,
    head_negative_loglik,
)
from hybridbnn.numerics import NotPositiveDefinite, Rng

logger = logging.getLogger(__name__)

LOSSES = ("mse", "nll", "elbo")
Z95 = 1.96


class ModelError(ValueError):
    """Layer stack, likelihood and loss do not fit together."""


class TrainingError(RuntimeError):
    """Numerical failure during fitting; carries the epoch it happened in."""

    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"numerical failure at epoch {epoch}: {cause}")
        self.epoch = epoch
        self.cause = cause


@dataclass
class ForwardOutput:
    value: Node
    marginals: GaussianMarginals | None = None
    head: tuple[Node, Node] | None = None
    head_raw: Node | None = None


class Model:
    """An ordered stack of layers plus an optional Gaussian likelihood.

    ``loss`` selects the training objective: ``"mse"`` for deterministic
    outputs, ``"nll"`` for a :class:`GaussianHead` terminal, and ``"elbo"``
    for a terminal :class:`GPLayer` with a :class:`GaussianLikelihood`.
    """

    def __init__(self, layers, likelihood: GaussianLikelihood | None = None, loss: str = "mse",
                 num_data: int = 1, input_dim: int | None = None):
        self.layers = list(layers)
        self.likelihood = likelihood
        self.loss = loss
        self.num_data = int(num_data)
        self.input_dim = input_dim
        self.validate()

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ModelError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if not self.layers:
            raise ModelError("model has no layers")
        if self.num_data < 1:
            raise ModelError("num_data must be positive")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, GaussianHead) and i != len(self.layers) - 1:
                raise ModelError("GaussianHead must be the last layer")
            d_in = layer.input_dim
            if width is not None and d_in != width:
                raise ModelError(f"layer {i} expects width {d_in} but receives {width}")
            width = layer.num_latent if isinstance(layer, GPLayer) else layer.output_dim
        last = self.layers[-1]
        if self.loss == "elbo":
            if not isinstance(last, GPLayer) or self.likelihood is None:
                raise ModelError("elbo loss needs a terminal GP layer and a Gaussian likelihood")
            if last.num_latent != 1:
                raise ModelError("elbo loss supports a single-output terminal GP layer")
        elif self.loss == "nll":
            if not isinstance(last, GaussianHead):
                raise ModelError("nll loss needs a GaussianHead terminal")
        elif isinstance(last, (GPLayer, VariationalDenseLayer, GaussianHead)) or self.likelihood is not None:
            raise ModelError("mse loss needs a deterministic terminal layer and no likelihood")

    def parameters(self) -> list[Parameter]:
        params = [p for layer in self.layers for p in layer.parameters()]
        if self.likelihood is not None:
            params += self.likelihood.parameters()
        return params

    @property
    def gp_layers(self) -> list[GPLayer]:
        return [layer for layer in self.layers if isinstance(layer, GPLayer)]

    @property
    def variational_layers(self) -> list[VariationalDenseLayer]:
        return [layer for layer in self.layers if isinstance(layer, VariationalDenseLayer)]

    def forward(self, X, rng: Rng | None = None, mode: str = "sample") -> ForwardOutput:
        """Propagate ``X`` through the stack.

        In ``"sample"`` mode stochastic layers emit reparameterized draws; in
        ``"mean"`` mode they pass their predictive means. A terminal GP layer
        always returns its analytic marginals.
        """
        if mode not in ("sample", "mean"):
            raise ValueError(f"unknown forward mode {mode!r}")
        interior = any(isinstance(layer, (GPLayer, VariationalDenseLayer)) for layer in self.layers[:-1])
        if mode == "sample" and rng is None and (interior or isinstance(self.layers[-1], VariationalDenseLayer)):
            raise ValueError("sample mode needs an rng")
        H = ad.const(np.asarray(X, dtype=np.float64))
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if isinstance(layer, GPLayer):
                if i == last:
                    marg = layer.predict_marginals(H)
                    return ForwardOutput(marg.mean, marginals=marg)
                H = layer.sample(H, rng) if mode == "sample" else layer.predict_marginals(H).mean
            elif isinstance(layer, VariationalDenseLayer):
                H = layer.sample_forward(H, rng) if mode == "sample" else layer.mean_forward(H)
            elif isinstance(layer, GaussianHead):
                mu, sigma = layer(H)
                return ForwardOutput(mu, head=(mu, sigma), head_raw=H)
            else:
                H = layer(H)
        return ForwardOutput(H)

    def weight_kl(self) -> Node:
        total = ad.const(0.0)
        for layer in self.variational_layers:
            total = total + layer.kl_weight * layer.kl()
        return total

    def loss_node(self, X, y, rng: Rng | None = None) -> Node:
        if self.loss == "elbo":
            return negative_elbo(self, X, y, rng)
        if self.loss == "nll":
            return negative_loglik_loss(self, X, y, rng)
        return mse_loss(self, X, y)

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]


def _require(model: Model, loss: str) -> None:
    if model.loss != loss:
        raise ModelError(f"model is configured for {model.loss!r}, not {loss!r}")


def negative_elbo(model: Model, X, y, rng: Rng | None) -> Node:
    """``-(N / |batch| * expected log-lik - GP KLs - weighted weight KLs)``."""
    _require(model, "elbo")
    out = model.forward(X, rng, "sample")
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    scale = model.num_data / y.shape[0]
    data = scale * model.likelihood.variational_expectation(out.marginals.mean, out.marginals.variance, y)
    kl = ad.const(0.0)
    for layer in model.gp_layers:
        kl = kl + layer.kl_to_prior()
    return -(data - kl - model.weight_kl())


def negative_loglik_loss(model: Model, X, y, rng: Rng | None) -> Node:
    _require(model, "nll")
    out = model.forward(X, rng, "sample")
    return head_negative_loglik(model.layers[-1], out.head_raw, y) + model.weight_kl()


def mse_loss(model: Model, X, y) -> Node:
    _require(model, "mse")
    out = model.forward(X, None, "mean")
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if out.value.shape != y.shape:
        raise ValueError(f"target shape {y.shape} does not match predictions {out.value.shape}")
    return ad.reduce_mean(ad.square(out.value - y))


class Adam:
    """Bias-corrected Adam over a fixed list of parameters."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(opt: Adam, params=None) -> None:
    opt.step()


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float | None = None
    batch_size: int | None = 32
    seed: int = 0
    mc_samples_predict: int = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr is not None and self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.mc_samples_predict < 1:
            raise ValueError("mc_samples_predict must be positive")


def default_lr(model: Model) -> float:
    return 0.01 if model.gp_layers else 0.001


@dataclass
class TrainingReport:
    loss_trace: list[float]
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0
    lr: float = 0.0
    max_jitter: float = 0.0
    variance_clips: int = 0

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]


def fit(model: Model, X, y, config: TrainConfig | None = None, params=None) -> TrainingReport:
    """Run ``config.epochs`` epochs of Adam on the model's loss.

    Each epoch shuffles the data into minibatches of ``batch_size`` (``None``
    means full batch); the recorded loss is the mean over the epoch's batches.
    ``params`` restricts optimization to a subset of the model's parameters.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ValueError("need a nonempty dataset with matching X and y")
    lr = default_lr(model) if config.lr is None else config.lr
    params = model.parameters() if params is None else list(params)
    opt = Adam(params, lr=lr)
    rng = Rng(config.seed)
    n = X.shape[0]
    batch = n if config.batch_size is None else min(config.batch_size, n)
    trace = []
    start = time.perf_counter()
    max_jitter = 0.0
    for epoch in range(1, config.epochs + 1):
        order = np.arange(n) if batch == n else rng.permutation(n)
        losses = []
        try:
            for lo in range(0, n, batch):
                idx = order[lo:lo + batch]
                ad.zero_grads(params)
                loss = model.loss_node(X[idx], y[idx], rng)
                ad.backward(loss)
                losses.append(float(loss.value))
                opt.step()
                for layer in model.gp_layers:
                    max_jitter = max(max_jitter, layer.last_jitter)
        except (NotPositiveDefinite, FloatingPointError) as exc:
            raise TrainingError(epoch, exc) from exc
        epoch_loss = float(np.mean(losses))
        if not math.isfinite(epoch_loss):
            raise TrainingError(epoch, FloatingPointError(f"loss is {epoch_loss}"))
        trace.append(epoch_loss)
        if epoch % 100 == 0:
            logger.debug("epoch %d loss %.6g", epoch, epoch_loss)
    seconds = time.perf_counter() - start
    pred = predict(model, X, config)
    return TrainingReport(
        loss_trace=trace,
        metrics=metrics(pred, y),
        seconds=seconds,
        lr=lr,
        max_jitter=max_jitter,
        variance_clips=sum(layer.clip_count for layer in model.gp_layers),
    )


def predict(model: Model, X_star, config: TrainConfig | None = None, rng: Rng | None = None) -> dict:
    """Predictive mean, variance and 95% interval at ``X_star``.

    Each Monte-Carlo draw samples the non-terminal stochastic layers and
    yields a Gaussian for the output (terminal GP marginals plus noise, or
    the head's mean and std). The returned moments are those of the
    resulting equal-weight mixture.
    """
    config = config or TrainConfig()
    X_star = np.asarray(X_star, dtype=np.float64)
    if X_star.ndim == 1:
        X_star = X_star[:, None]
    n = X_star.shape[0]
    if n == 0:
        empty = np.zeros(0)
        return {"mean": empty, "variance": empty, "lo95": empty, "hi95": empty}
    rng = rng or Rng(config.seed).spawn()
    # a terminal GP is integrated analytically, so only interior randomness needs draws
    interior = any(isinstance(layer, (GPLayer, VariationalDenseLayer)) for layer in model.layers[:-1])
    draws = config.mc_samples_predict if interior else 1
    means = np.empty((draws, n))
    variances = np.empty((draws, n))
    for s in range(draws):
        out = model.forward(X_star, rng, "sample")
        if out.marginals is not None:
            means[s] = out.marginals.mean.value[:, 0]
            variances[s] = out.marginals.variance.value[:, 0] + model.likelihood.variance.constrained()
        elif out.head is not None:
            means[s] = out.head[0].value[:, 0]
            variances[s] = out.head[1].value[:, 0] ** 2
        else:
            means[s] = out.value.value[:, 0]
            variances[s] = 0.0
    mean = means.mean(axis=0)
    variance = variances.mean(axis=0) + means.var(axis=0)
    half = Z95 * np.sqrt(variance)
    return {"mean": mean, "variance": variance, "lo95": mean - half, "hi95": mean + half}


def metrics(pred: dict, y) -> dict:
    """RMSE, mean negative log predictive density and 95% interval coverage."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mean = np.asarray(pred["mean"], dtype=np.float64)
    var = np.asarray(pred["variance"], dtype=np.float64)
    if y.size == 0:
        raise ValueError("metrics need at least one target")
    if mean.shape != y.shape:
        raise ValueError(f"prediction length {mean.shape} does not match targets {y.shape}")
    resid = y - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        nlpd_terms = 0.5 * np.log(2.0 * np.pi * var) + resid ** 2 / (2.0 * var)
    nlpd_terms = np.where(var > 0, nlpd_terms, np.inf)
    inside = (y >= pred["lo95"]) & (y <= pred["hi95"])
    return {
        "rmse": float(np.sqrt(np.mean(resid ** 2))),
        "nlpd": float(np.mean(nlpd_terms)),
        "coverage_95": float(np.mean(inside)),
    }
