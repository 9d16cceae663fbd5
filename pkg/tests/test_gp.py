"""GP layer: kernel values, whitened predictive/KL/ELBO against dense numpy
and adaptive-integration oracles, and the variance-moderation property."""

import numpy as np
import pytest
from scipy.integrate import quad as scipy_quad

from dklshift import gp, tensor as T
from dklshift.errors import ConfigError, ContractError, DimensionError, StateError
from dklshift.gp import (
    GpPredictive,
    RbfKernelParams,
    VariationalState,
    elbo,
    expected_log_lik,
    kl_whitened,
    predict_proba,
    predictive_marginals,
    rbf_kernel,
)
from dklshift.tensor import JITTER_SCALE, Tensor, finite_diff_check


def theta_from(log_ls: float = 0.0, log_os: float = 0.0) -> RbfKernelParams:
    k = RbfKernelParams.init()
    k.log_lengthscale.values[...] = log_ls
    k.log_outputscale.values[...] = log_os
    return k


def random_state(rng, z: np.ndarray) -> VariationalState:
    m = z.shape[0]
    low = np.tril(0.3 * rng.normal(size=(m, m)), -1) + np.diag(np.exp(0.4 * rng.normal(size=m)))
    return VariationalState.from_cholesky(z, rng.normal(size=m), low)


def np_predictive(theta, state, feats):
    """Dense recomputation of the whitened predictive, jitter included."""
    ls = float(np.exp(theta.log_lengthscale.values))
    os_ = float(np.exp(theta.log_outputscale.values))
    z = state.inducing.values

    def k(a, b):
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return os_ * np.exp(-sq / (2.0 * ls * ls))

    kzz = k(z, z) + JITTER_SCALE * os_ * np.eye(z.shape[0])
    lz = np.linalg.cholesky(kzz)
    amat = np.linalg.solve(lz, k(z, feats))
    lv = state.chol_values()
    mu = amat.T @ state.mean.values
    var = os_ - (amat**2).sum(0) + ((lv.T @ amat) ** 2).sum(0)
    return mu, np.maximum(var, 1e-12)


# ---------------------------------------------------------------------------
# kernel


def test_rbf_zero_distance_gives_outputscale():
    th = theta_from(log_os=np.log(2.5))
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(rbf_kernel(th, x, x).values, [[2.5]], rtol=1e-15)


def test_rbf_at_distance_ell_sqrt2():
    ls = 0.7
    th = theta_from(log_ls=np.log(ls), log_os=np.log(1.3))
    x = Tensor(np.zeros((1, 2)))
    y = Tensor(np.array([[ls * np.sqrt(2.0), 0.0]]))
    np.testing.assert_allclose(rbf_kernel(th, x, y).values, [[1.3 * np.exp(-1.0)]], rtol=1e-12)


def test_rbf_psd_and_symmetric(rng):
    th = theta_from(log_ls=0.3, log_os=-0.2)
    x = rng.normal(size=(20, 16))
    k = rbf_kernel(th, Tensor(x), Tensor(x)).values
    np.testing.assert_allclose(k, k.T, atol=1e-15)
    np.linalg.cholesky(k + 1e-6 * np.eye(20))  # raises if not PSD


def test_rbf_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        rbf_kernel(theta_from(), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 5))))


def test_rbf_matches_dense_formula(rng):
    th = theta_from(log_ls=0.4, log_os=0.9)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    sq = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    expected = np.exp(0.9) * np.exp(-sq / (2.0 * np.exp(0.8)))
    np.testing.assert_allclose(rbf_kernel(th, Tensor(x), Tensor(y)).values, expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# predictive marginals


def test_prior_state_recovers_prior_marginals(rng):
    th = theta_from(log_os=np.log(1.7))
    z = rng.normal(size=(6, 3))
    pred = predictive_marginals(th, VariationalState.init_prior(z), Tensor(rng.normal(size=(9, 3))))
    np.testing.assert_allclose(pred.mean.values, np.zeros(9), atol=1e-12)
    np.testing.assert_allclose(pred.var.values, np.full(9, 1.7), rtol=1e-9)


def test_predictive_matches_dense_oracle(rng):
    th = theta_from(log_ls=0.2, log_os=0.5)
    z = rng.normal(size=(6, 3))
    state = random_state(rng, z)
    feats = rng.normal(size=(11, 3))
    pred = predictive_marginals(th, state, Tensor(feats))
    mu, var = np_predictive(th, state, feats)
    np.testing.assert_allclose(pred.mean.values, mu, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(pred.var.values, var, rtol=1e-8, atol=1e-12)


def test_predictive_at_inducing_row_tiny_chol(rng):
    # f placed on inducing row j with L_v -> 0: variance collapses to ~0 and
    # the mean approaches the dense formula's value at that column
    th = theta_from()
    z = rng.normal(size=(5, 2))
    mean = rng.normal(size=5)
    state = VariationalState.from_cholesky(z, mean, 1e-9 * np.eye(5))
    j = 2
    pred = predictive_marginals(th, state, Tensor(z[j : j + 1]))
    mu, var = np_predictive(th, state, z[j : j + 1])
    np.testing.assert_allclose(pred.mean.values, mu, rtol=1e-9)
    assert pred.var.values[0] < 1e-4
    # independent closed form: mu = e_j' Kzf' Lz^-T m with Kzf = Kzz[:, j] less jitter
    ls = np.linalg.cholesky(
        np.exp(0.0) * np.exp(-((z[:, None, :] - z[None, :, :]) ** 2).sum(-1) / 2.0)
        + JITTER_SCALE * np.eye(5)
    )
    kzf = np.exp(-((z - z[j]) ** 2).sum(-1) / 2.0)
    expected = kzf @ np.linalg.inv(ls).T @ mean
    np.testing.assert_allclose(pred.mean.values[0], expected, rtol=1e-6)


def test_predictive_duplicate_rows_identical(rng):
    th = theta_from(log_ls=-0.3)
    z = rng.normal(size=(4, 3))
    state = random_state(rng, z)
    f = rng.normal(size=3)
    pred = predictive_marginals(th, state, Tensor(np.stack([f, f, f])))
    assert pred.mean.values[0] == pred.mean.values[1] == pred.mean.values[2]
    assert pred.var.values[0] == pred.var.values[1] == pred.var.values[2]


def test_predictive_variance_nonnegative(rng):
    th = theta_from(log_ls=-1.0)
    z = rng.normal(size=(8, 2))
    state = random_state(rng, z)
    pred = predictive_marginals(th, state, Tensor(rng.normal(size=(40, 2))))
    assert np.all(pred.var.values >= 1e-12)


def test_predictive_permutation_invariance(rng):
    # permuting the inducing rows while carrying the *unwhitened* posterior
    # along (the whitened coordinates are basis-dependent, so m_v and L_v
    # transform through L_z, not by direct permutation) leaves the
    # predictive marginals unchanged
    th = theta_from(log_ls=0.1, log_os=0.2)
    z = rng.normal(size=(6, 3))
    state = random_state(rng, z)
    feats = rng.normal(size=(9, 3))
    base = predictive_marginals(th, state, Tensor(feats))

    def lz_of(zz):
        sq = ((zz[:, None, :] - zz[None, :, :]) ** 2).sum(-1)
        os_ = float(np.exp(th.log_outputscale.values))
        k = os_ * np.exp(-sq / (2.0 * np.exp(2.0 * float(th.log_lengthscale.values))))
        return np.linalg.cholesky(k + JITTER_SCALE * os_ * np.eye(6))

    perm = rng.permutation(6)
    pmat = np.eye(6)[perm]
    carry = np.linalg.solve(lz_of(z[perm]), pmat @ lz_of(z))
    lv = state.chol_values()
    sigma = carry @ (lv @ lv.T) @ carry.T
    permuted = VariationalState.from_cholesky(
        z[perm], carry @ state.mean.values, np.linalg.cholesky(sigma)
    )
    other = predictive_marginals(th, permuted, Tensor(feats))
    np.testing.assert_allclose(other.var.values, base.var.values, rtol=1e-7, atol=1e-10)
    np.testing.assert_allclose(other.mean.values, base.mean.values, rtol=1e-7, atol=1e-10)


# ---------------------------------------------------------------------------
# KL


def test_kl_zero_at_prior(rng):
    z = rng.normal(size=(7, 2))
    assert kl_whitened(VariationalState.init_prior(z)).item() == pytest.approx(0.0, abs=1e-14)


def test_kl_half_for_unit_mean_shift(rng):
    z = rng.normal(size=(4, 2))
    mean = np.zeros(4)
    mean[0] = 1.0
    state = VariationalState.from_cholesky(z, mean, np.eye(4))
    assert kl_whitened(state).item() == pytest.approx(0.5, rel=1e-12)


def test_kl_closed_form_matches_gaussian_formula(rng):
    z = rng.normal(size=(5, 2))
    state = random_state(rng, z)
    lv = state.chol_values()
    sigma = lv @ lv.T
    m = state.mean.values
    expected = 0.5 * (np.trace(sigma) + m @ m - 5 - np.log(np.linalg.det(sigma)))
    assert kl_whitened(state).item() == pytest.approx(expected, rel=1e-10)


def test_kl_monte_carlo_oracle(rng):
    z = rng.normal(size=(5, 2))
    state = random_state(rng, z)
    lv = state.chol_values()
    m = state.mean.values
    draws = rng.standard_normal((1_000_000, 5)) @ lv.T + m
    # log q - log p per draw, q = N(m, LL'), p = N(0, I)
    resid = np.linalg.solve(lv, (draws - m).T)
    log_q = -0.5 * (resid**2).sum(0) - np.log(np.diag(lv)).sum() - 2.5 * np.log(2 * np.pi)
    log_p = -0.5 * (draws**2).sum(1) - 2.5 * np.log(2 * np.pi)
    samples = log_q - log_p
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(kl_whitened(state).item() - samples.mean()) < 3 * se


def test_kl_nonnegative_random_states(rng):
    for _ in range(20):
        z = rng.normal(size=(4, 2))
        assert kl_whitened(random_state(rng, z)).item() >= 0.0


def test_state_rejects_bad_cholesky(rng):
    z = rng.normal(size=(3, 2))
    with pytest.raises(StateError):
        VariationalState.from_cholesky(z, np.zeros(3), -np.eye(3))
    with pytest.raises(StateError):
        VariationalState.from_cholesky(z, np.zeros(3), np.triu(np.ones((3, 3))))


# ---------------------------------------------------------------------------
# expected log-likelihood and predictive probability


def _pred(mu, var) -> GpPredictive:
    return GpPredictive(Tensor(np.asarray(mu, dtype=np.float64)), Tensor(np.asarray(var, dtype=np.float64)))


def test_ell_zero_variance_zero_mean():
    val = expected_log_lik(_pred([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]), [1, 0, 1]).item()
    assert val == pytest.approx(3.0 * np.log(0.5), rel=1e-12)


def test_ell_zero_variance_equals_bce(rng):
    mu = rng.normal(size=6)
    y = (rng.random(6) < 0.5).astype(int)
    expected = np.sum(np.where(y == 1, -np.logaddexp(0.0, -mu), -np.logaddexp(0.0, mu)))
    val = expected_log_lik(_pred(mu, np.zeros(6)), y).item()
    assert val == pytest.approx(expected, rel=1e-12)


def quad_e_log_sigmoid(mu, var, y):
    sd = np.sqrt(var)
    sign = 2.0 * y - 1.0

    def integrand(t):
        f = mu + sd * t
        return -np.logaddexp(0.0, -sign * f) * np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)

    val, err = scipy_quad(integrand, -12, 12, limit=400, epsabs=1e-12, epsrel=1e-12)
    assert err < 1e-8
    return val


def test_ell_matches_adaptive_integration():
    val = expected_log_lik(_pred([1.0], [4.0]), [1]).item()
    assert val == pytest.approx(quad_e_log_sigmoid(1.0, 4.0, 1), abs=1e-6)


def test_ell_grid_against_integration():
    for mu in (-4.0, -1.5, 0.0, 2.0, 4.0):
        for var in (0.0, 0.5, 4.0, 9.0):
            for y in (0, 1):
                got = expected_log_lik(_pred([mu], [var]), [y]).item()
                assert got == pytest.approx(quad_e_log_sigmoid(mu, var, y), abs=1e-6)


def test_ell_rejects_bad_inputs(rng):
    with pytest.raises(ConfigError):
        expected_log_lik(_pred([0.0], [1.0]), [1], quad_order=0)
    with pytest.raises(ContractError):
        expected_log_lik(_pred([0.0], [1.0]), [2])
    with pytest.raises(DimensionError):
        expected_log_lik(_pred([0.0, 1.0], [1.0, 1.0]), [1])


def test_predict_proba_half_at_zero_mean():
    p = predict_proba(_pred([0.0, 0.0], [0.1, 7.0]))
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-12)


def test_predict_proba_zero_variance_is_sigmoid():
    mu = np.array([-3.0, -0.5, 0.7, 2.0])
    p = predict_proba(_pred(mu, np.zeros(4)))
    np.testing.assert_allclose(p, 1.0 / (1.0 + np.exp(-mu)), rtol=1e-9)


def test_predict_proba_integration_oracle():
    def probit_free(mu, var):
        sd = np.sqrt(var)

        def integrand(t):
            return (1.0 / (1.0 + np.exp(-(mu + sd * t)))) * np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)

        return scipy_quad(integrand, -12, 12, limit=200)[0]

    p = predict_proba(_pred([2.0], [9.0]))[0]
    assert p == pytest.approx(probit_free(2.0, 9.0), abs=1e-6)
    assert abs(p - 0.5) < abs(1.0 / (1.0 + np.exp(-2.0)) - 0.5)


def test_predict_proba_clamped():
    p = predict_proba(_pred([60.0, -60.0], [0.0, 0.0]))
    assert p[0] == 1.0 - 1e-7 and p[1] == 1e-7


def test_moderation_strictly_monotone():
    # the shift mechanism: more variance pulls probabilities toward 0.5
    for mu in (1.3, -0.7):
        grid = np.linspace(0.0, 9.0, 20)
        p = predict_proba(_pred(np.full(20, mu), grid))
        gaps = np.abs(p - 0.5)
        assert np.all(np.diff(gaps) < 0)


# ---------------------------------------------------------------------------
# ELBO


def test_elbo_full_batch_prior_state(rng):
    th = theta_from()
    z = rng.normal(size=(5, 2))
    state = VariationalState.init_prior(z)
    feats = rng.normal(size=(5, 2))
    y = np.array([1, 0, 1, 1, 0])
    pred = predictive_marginals(th, state, Tensor(feats))
    expected = expected_log_lik(pred, y).item()  # KL = 0 at the prior
    assert elbo(th, state, Tensor(feats), y, n_total=5).item() == pytest.approx(expected, rel=1e-12)


def test_elbo_scaling_in_n_total(rng):
    th = theta_from()
    z = rng.normal(size=(4, 2))
    state = random_state(rng, z)
    feats = rng.normal(size=(3, 2))
    y = np.array([1, 0, 1])
    kl = kl_whitened(state).item()
    e1 = elbo(th, state, Tensor(feats), y, n_total=10).item()
    e2 = elbo(th, state, Tensor(feats), y, n_total=20).item()
    assert e2 + kl == pytest.approx(2.0 * (e1 + kl), rel=1e-9)
    assert e1 < 0.0  # likelihood term negative, KL nonnegative


def test_elbo_input_contracts(rng):
    th = theta_from()
    z = rng.normal(size=(4, 2))
    state = VariationalState.init_prior(z)
    with pytest.raises(ConfigError):
        elbo(th, state, Tensor(np.zeros((0, 2))), np.zeros(0, dtype=int), n_total=5)
    with pytest.raises(ConfigError):
        elbo(th, state, Tensor(rng.normal(size=(4, 2))), np.array([1, 0, 1, 0]), n_total=2)


def test_elbo_gradients_toy(rng):
    # 5 inducing points, 4 instances, perturbed state: every GP-side leaf
    th = theta_from(log_ls=0.2, log_os=-0.1)
    z = rng.normal(size=(5, 3))
    state = random_state(rng, z)
    feats = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    y = np.array([1, 0, 1, 1])

    def loss(_):
        return T.scalar_mul(elbo(th, state, feats, y, n_total=12, quad_order=30), -1.0)

    leaves = [
        feats,
        th.log_lengthscale,
        th.log_outputscale,
        state.inducing,
        state.mean,
        state.chol_strict_lower,
        state.chol_log_diag,
    ]
    worst = max(finite_diff_check(loss, leaf) for leaf in leaves)
    assert worst < 1e-4
