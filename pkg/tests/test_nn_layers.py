import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridbnn import autodiff as ad
from hybridbnn import oracle
from hybridbnn.gp_layer import GaussianMarginals
from hybridbnn.nn_layers import (
    DenseLayer,
    GaussianHead,
    GaussianLikelihood,
    VariationalDenseLayer,
    dense_forward,
    head_negative_loglik,
    likelihood_variational_expectation,
    vdense_forward_sample,
    vdense_kl,
)
from hybridbnn.numerics import Rng


def test_dense_relu_example():
    layer = DenseLayer(2, 2, "relu")
    layer.W.assign([[1.0, -1.0], [2.0, 0.5]])
    layer.b.assign([0.0, -3.0])
    out = dense_forward(layer, [[1.0, 2.0]]).value
    np.testing.assert_array_equal(out, [[0.0, 0.0]])
    out = dense_forward(layer, [[3.0, 1.0]]).value
    np.testing.assert_allclose(out, [[2.0, 3.5]])


def test_dense_linear_is_affine(rng):
    layer = DenseLayer(3, 2, "linear", Rng(1))
    H = rng.normal(size=(5, 3))
    np.testing.assert_allclose(layer(H).value, H @ layer.W.value.T + layer.b.value)


def test_dense_glorot_bounds():
    layer = DenseLayer(1, 100, rng=Rng(3))
    assert np.all(np.abs(layer.W.value) <= math.sqrt(6.0 / 101))
    np.testing.assert_array_equal(layer.b.value, 0.0)


def test_dense_rejects_wrong_width():
    with pytest.raises(ValueError):
        DenseLayer(3, 2)(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        DenseLayer(3, 2, "tanh")


def test_vdense_degenerate_posterior_is_deterministic(rng):
    layer = VariationalDenseLayer(3, 2, "relu", rng=Rng(0))
    layer.W_rho.assign(np.full((2, 3), -40.0))
    layer.b_rho.assign(np.full(2, -40.0))
    H = rng.normal(size=(4, 3))
    np.testing.assert_allclose(vdense_forward_sample(layer, H, Rng(5)).value, layer.mean_forward(H).value,
                               atol=1e-12)


def test_vdense_monte_carlo_mean(rng):
    layer = VariationalDenseLayer(2, 1, "linear", rng=Rng(0))
    layer.W_rho.assign(np.full((1, 2), 0.3))
    layer.b_rho.assign(np.full(1, 0.3))
    H = rng.normal(size=(1, 2))
    r = Rng(8)
    draws = np.array([layer.sample_forward(H, r).value[0, 0] for _ in range(20000)])
    sd = float(ad.softplus_value(0.3))
    var = sd ** 2 * (np.sum(H ** 2) + 1.0)
    assert abs(draws.mean() - layer.mean_forward(H).value[0, 0]) < 3 * math.sqrt(var / draws.size)
    assert draws.var() == pytest.approx(var, rel=0.05)


def test_vdense_sample_determinism(rng):
    layer = VariationalDenseLayer(3, 2, rng=Rng(0), init_std=0.5)
    H = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(layer.sample_forward(H, Rng(1)).value, layer.sample_forward(H, Rng(1)).value)
    assert not np.array_equal(layer.sample_forward(H, Rng(1)).value, layer.sample_forward(H, Rng(2)).value)


def test_vdense_kl_zero_at_prior():
    layer = VariationalDenseLayer(2, 3)
    layer.W_mean.assign(np.zeros((3, 2)))
    layer.b_mean.assign(np.zeros(3))
    layer.W_rho.assign_constrained(np.ones((3, 2)))
    layer.b_rho.assign_constrained(np.ones(3))
    assert abs(vdense_kl(layer).value) < 1e-12


def test_vdense_kl_single_entry_example():
    layer = VariationalDenseLayer(1, 1)
    layer.W_mean.assign([[1.0]])
    layer.W_rho.assign_constrained([[1.0]])
    layer.b_mean.assign([0.0])
    layer.b_rho.assign_constrained([1.0])
    assert layer.kl().value == pytest.approx(0.5, abs=1e-12)
    layer.W_mean.assign([[0.0]])
    layer.W_rho.assign_constrained([[2.0]])
    assert layer.kl().value == pytest.approx(0.5 * (4.0 - 1.0 - math.log(4.0)), abs=1e-12)


def test_vdense_kl_matches_monte_carlo(rng):
    layer = VariationalDenseLayer(2, 2, rng=Rng(0))
    layer.W_rho.assign(rng.normal(size=(2, 2)))
    layer.b_rho.assign(rng.normal(size=2))
    layer.b_mean.assign(rng.normal(size=2))
    mean = np.concatenate([layer.W_mean.value.ravel(), layer.b_mean.value])
    sd = np.concatenate([layer.W_rho.constrained().ravel(), layer.b_rho.constrained()])
    est, se = oracle.gaussian_kl_mc(mean, np.diag(sd ** 2), np.zeros(6), np.eye(6), 200_000, Rng(4))
    assert abs(layer.kl().value - est) < 3 * se


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-8, 5))
def test_vdense_kl_nonnegative(mu, rho):
    layer = VariationalDenseLayer(1, 1)
    layer.W_mean.assign([[mu]])
    layer.W_rho.assign([[rho]])
    assert layer.kl().value >= -1e-12


def test_head_standard_example():
    nll = head_negative_loglik(GaussianHead(), [[0.0, float(ad.inverse_softplus(1.0 - 1e-6))]], [0.0])
    assert nll.value == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-9)


def test_head_doubling_sigma_adds_log2():
    raw1 = [[0.3, float(ad.inverse_softplus(0.5 - 1e-6))]]
    raw2 = [[0.3, float(ad.inverse_softplus(1.0 - 1e-6))]]
    # y equals the mean, so only the log sigma term changes
    d = head_negative_loglik(GaussianHead(), raw2, [0.3]).value - head_negative_loglik(GaussianHead(), raw1, [0.3]).value
    assert d == pytest.approx(math.log(2.0), abs=1e-9)


def test_head_is_mean_over_rows(rng):
    raw = rng.normal(size=(6, 2))
    y = rng.normal(size=6)
    rows = [head_negative_loglik(GaussianHead(), raw[i:i + 1], y[i:i + 1]).value for i in range(6)]
    assert head_negative_loglik(GaussianHead(), raw, y).value == pytest.approx(np.mean(rows), rel=1e-12)


@given(st.floats(-1e4, -40))
def test_head_std_stays_positive(raw_scale):
    _, sigma = GaussianHead()([[0.0, raw_scale]])
    assert sigma.value[0, 0] >= 1e-6
    assert np.isfinite(head_negative_loglik(GaussianHead(), [[0.0, raw_scale]], [1.0]).value)


def test_head_needs_two_columns():
    with pytest.raises(ValueError):
        GaussianHead()(np.zeros((3, 1)))


def test_ve_zero_variance_is_log_density():
    lik = GaussianLikelihood(0.25)
    ve = lik.variational_expectation([[1.0]], [[0.0]], [1.5])
    expected = -0.5 * math.log(2 * math.pi * 0.25) - 0.25 / 0.5
    assert ve.value == pytest.approx(expected, abs=1e-12)


def test_ve_unit_example():
    lik = GaussianLikelihood(1.0)
    ve = lik.variational_expectation([[0.0]], [[1.0]], [0.0])
    assert ve.value == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(m=st.floats(-3, 3), v=st.floats(0, 4), y=st.floats(-3, 3), s2=st.floats(0.01, 2))
def test_ve_matches_quadrature(m, v, y, s2):
    lik = GaussianLikelihood(s2)
    s2 = float(lik.variance.constrained())
    ve = lik.variational_expectation([[m]], [[v]], [y]).value
    gh = oracle.gauss_hermite_expectation(lambda t: -0.5 * np.log(2 * np.pi * s2) - (y - t) ** 2 / (2 * s2), m, v)
    assert ve == pytest.approx(gh, abs=1e-8)


@given(st.floats(0, 3), st.floats(0.01, 3))
def test_ve_decreases_with_latent_variance(v, dv):
    lik = GaussianLikelihood(0.5)
    a = lik.variational_expectation([[0.2]], [[v]], [0.0]).value
    b = lik.variational_expectation([[0.2]], [[v + dv]], [0.0]).value
    assert b < a


def test_ve_sums_over_points(rng):
    lik = GaussianLikelihood(0.3)
    m, v, y = rng.normal(size=(5, 1)), rng.uniform(0, 1, (5, 1)), rng.normal(size=5)
    total = likelihood_variational_expectation(lik, GaussianMarginals(ad.const(m), ad.const(v)), y).value
    parts = sum(lik.variational_expectation(m[i:i + 1], v[i:i + 1], y[i:i + 1]).value for i in range(5))
    assert total == pytest.approx(parts, rel=1e-12)


def test_ve_shape_checks():
    lik = GaussianLikelihood()
    with pytest.raises(ValueError):
        lik.variational_expectation(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(4))
    marg = GaussianMarginals(ad.const(np.zeros((3, 2))), ad.const(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        likelihood_variational_expectation(lik, marg, np.zeros(3))
