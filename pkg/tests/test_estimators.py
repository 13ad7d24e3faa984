"""Point estimators: restricted LS, posterior means, one-way rules, covariates."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoway_eb import (
    CovariateIndex,
    GraphError,
    Hyperparams,
    LimitFlag,
    MatchedPanel,
    SolverConfig,
    build_graph,
    ls_estimate,
    moment_lambda_b,
    mu_j,
    one_way_shrink,
    oneway_sigma2,
    partial_out_covariates,
    posterior_mean,
    projected_one_way_shrink,
    rotate_to_normalized,
    rotate_transpose,
    sigma2_estimate,
)

import reference

TIGHT = SolverConfig(rel_tol=1e-12)


@pytest.fixture(scope="module")
def instance():
    rng = np.random.default_rng(2024)
    panel, graph = reference.random_connected_panel(rng, r=15, c=6)
    theta = np.concatenate([rng.normal(0.0, 0.8, 15), rng.normal(0.0, 0.25, 6)])
    theta[15:] -= theta[15:].mean()
    y = reference.model_outcomes(rng, graph, theta, sigma2=0.12)
    return panel, graph, theta, y


def test_rotation_matches_dense(instance, rng):
    _, graph, _, _ = instance
    r, c = graph.r, graph.c
    R = reference.normalizer_dense(r, c)
    v = rng.standard_normal(r + c)
    np.testing.assert_allclose(rotate_to_normalized(v, r), R @ v, atol=1e-13)
    np.testing.assert_allclose(rotate_transpose(v, r), R.T @ v, atol=1e-13)
    V = rng.standard_normal((r + c, 3))
    np.testing.assert_allclose(rotate_transpose(V, r), R.T @ V, atol=1e-13)


def test_rotation_is_idempotent_and_kills_null(rng):
    r, c = 9, 4
    v = rng.standard_normal(r + c)
    once = rotate_to_normalized(v, r)
    np.testing.assert_allclose(rotate_to_normalized(once, r), once, atol=1e-13)
    assert abs(once[r:].sum()) < 1e-12
    q = np.concatenate([np.ones(r), -np.ones(c)])
    np.testing.assert_allclose(rotate_to_normalized(v + 3.7 * q, r), once, atol=1e-12)


def test_ls_matches_dense(instance):
    _, graph, _, y = instance
    fit = ls_estimate(graph, y, TIGHT)
    want = reference.theta_ls_dense(graph, y)
    np.testing.assert_allclose(fit.theta, want, atol=1e-9)
    assert abs(fit.beta_hat.sum()) < 1e-12
    assert abs(fit.normalization_check) < 1e-12
    # fitted values reproduce B theta
    B = reference.incidence_dense(graph)
    np.testing.assert_allclose(fit.fitted_values(graph), B @ want, atol=1e-9)


def test_ls_requires_connected_graph():
    panel = MatchedPanel(
        i=np.array([1, 2]), t=np.array([1, 1]), j=np.array([1, 2]), y=np.zeros(2)
    )
    graph = build_graph(panel)
    with pytest.raises(GraphError, match="connected"):
        ls_estimate(graph, np.zeros(2))


def test_sigma2_estimate_zero_on_noiseless_data(instance):
    _, graph, theta, _ = instance
    y = graph.incidence_apply(theta)
    assert sigma2_estimate(graph, y) < 1e-12


def test_sigma2_estimate_uses_correct_dof(instance):
    _, graph, _, y = instance
    fit = ls_estimate(graph, y, TIGHT)
    resid = y - fit.fitted_values(graph)
    want = resid @ resid / (graph.n - (graph.r + graph.c - 1))
    np.testing.assert_allclose(sigma2_estimate(graph, y, ls=fit), want, rtol=1e-12)


def test_sigma2_estimate_saturated_panel_raises():
    panel = MatchedPanel(
        i=np.array([1, 2]), t=np.array([1, 1]), j=np.array([1, 1]), y=np.ones(2)
    )
    graph = build_graph(panel)
    with pytest.raises(ValueError, match="degrees of freedom"):
        sigma2_estimate(graph, np.ones(2))


POINTS = [
    (0.5, 2.0, 0.0, 0.0),
    (3.0, 0.3, 0.7, 0.4),
    (0.02, 40.0, -0.8, -1.1),
    (1.0, 1.0, 0.0, 2.0),
]


@pytest.mark.parametrize("lam_a,lam_b,phi,mu", POINTS)
def test_posterior_matches_dense(instance, lam_a, lam_b, phi, mu):
    _, graph, _, y = instance
    hp = Hyperparams(mu=mu, lambda_a=lam_a, lambda_b=lam_b, phi=phi)
    got = posterior_mean(graph, y, hp, config=TIGHT).theta
    want = reference.posterior_dense(graph, y, lam_a, lam_b, phi, mu)
    np.testing.assert_allclose(got, want, atol=1e-9)
    # the one-solve shrunk form is the same estimator
    other = reference.posterior_dense_shrunk_form(graph, y, lam_a, lam_b, phi, mu)
    np.testing.assert_allclose(want, other, atol=1e-10)


def test_posterior_at_zero_shrinkage_is_ls(instance):
    _, graph, _, y = instance
    hp = Hyperparams(mu=0.0, lambda_a=1e-12, lambda_b=1e-12, phi=0.0)
    got = posterior_mean(graph, y, hp, config=TIGHT).theta
    want = ls_estimate(graph, y, TIGHT).theta
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_posterior_is_affine_in_outcomes(instance, rng):
    _, graph, _, y = instance
    hp = Hyperparams(mu=0.4, lambda_a=0.8, lambda_b=1.7, phi=0.3)
    y2 = rng.standard_normal(graph.n)
    t = 0.31
    left = posterior_mean(graph, (1 - t) * y + t * y2, hp, config=TIGHT).theta
    a = posterior_mean(graph, y, hp, config=TIGHT).theta
    b = posterior_mean(graph, y2, hp, config=TIGHT).theta
    np.testing.assert_allclose(left, (1 - t) * a + t * b, atol=1e-8)


def test_alpha_pinned_limit_matches_closed_form(instance):
    _, graph, _, y = instance
    mu = 0.25
    lam_b = 1.8
    got = posterior_mean(graph, y, Hyperparams(mu=mu, lambda_a=LimitFlag.INFINITY, lambda_b=lam_b))
    assert got.diagnostics["dispatch"] == "alpha_pinned_closed_form"
    # large-but-finite lambda_a approaches the dispatch
    near = posterior_mean(
        graph, y, Hyperparams(mu=mu, lambda_a=1e10, lambda_b=lam_b), config=TIGHT
    )
    np.testing.assert_allclose(got.theta, near.theta, atol=1e-6)
    # the beta block is the one-way rule applied to de-located outcomes
    want_beta = one_way_shrink(graph, y - mu, lam_b)
    np.testing.assert_allclose(got.beta_hat, want_beta, atol=1e-12)


def test_alpha_free_limit_matches_projected_one_way(instance):
    _, graph, _, y = instance
    lam_b = 2.3
    got = posterior_mean(
        graph, y, Hyperparams(mu=0.0, lambda_a=LimitFlag.ZERO, lambda_b=lam_b), config=TIGHT
    )
    want_beta = projected_one_way_shrink(graph, y, lam_b, config=TIGHT)
    np.testing.assert_allclose(got.beta_hat, want_beta, atol=1e-9)
    # and both agree with the dense posterior at lam_a = 0
    dense = reference.posterior_dense(graph, y, 0.0, lam_b, 0.0, 0.0)
    np.testing.assert_allclose(got.theta, dense, atol=1e-9)


def test_one_way_shrink_dense_formula(instance):
    _, graph, _, y = instance
    lam_b = 4.0
    sums = np.zeros(graph.c)
    np.add.at(sums, graph.j_idx, y)
    want = sums / (graph.d_b + lam_b)
    want = want - want.mean()
    np.testing.assert_allclose(one_way_shrink(graph, y, lam_b), want, atol=1e-13)
    # lam_b = 0 gives demeaned per-column means
    means = sums / graph.d_b
    np.testing.assert_allclose(one_way_shrink(graph, y, 0.0), means - means.mean(), atol=1e-13)


def test_projected_one_way_matches_dense(instance):
    _, graph, _, y = instance
    lam_b = 0.9
    L2p = reference.projected_laplacian_dense(graph)
    beta_ls = reference.theta_ls_dense(graph, y)[graph.r :]
    want = L2p @ np.linalg.solve(L2p + lam_b * np.eye(graph.c), beta_ls)
    want = want - want.mean()
    got = projected_one_way_shrink(graph, y, lam_b, config=TIGHT)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_oneway_sigma2_is_residual_variance_around_column_means(instance):
    _, graph, _, y = instance
    means = np.zeros(graph.c)
    np.add.at(means, graph.j_idx, y)
    means /= graph.d_b
    resid = y - means[graph.j_idx]
    want = resid @ resid / (graph.n - graph.c)
    np.testing.assert_allclose(oneway_sigma2(graph, y), want, rtol=1e-12)


def test_moment_lambda_b_inverts_signal_variance(instance):
    _, graph, _, y = instance
    sigma2 = 0.05
    means = np.zeros(graph.c)
    np.add.at(means, graph.j_idx, y)
    means /= graph.d_b
    signal = np.var(means, ddof=1) - sigma2 / graph.d_b.mean()
    np.testing.assert_allclose(moment_lambda_b(graph, y, sigma2), sigma2 / signal, rtol=1e-12)


def test_moment_lambda_b_flags_noise_dominated_columns(instance):
    _, graph, _, y = instance
    with pytest.raises(ValueError, match="full shrinkage"):
        moment_lambda_b(graph, y, sigma2=1e6)


def test_partial_out_recovers_joint_ols(instance, rng):
    panel, graph, theta, _ = instance
    gamma = np.array([0.8, -1.5])
    X = rng.standard_normal((graph.n, 2))
    y = reference.model_outcomes(rng, graph, theta, 0.12) + X @ gamma
    withx = MatchedPanel(
        i=panel.i, t=panel.t, j=panel.j, y=y, x=X, r=panel.r, c=panel.c
    )
    resid_y, gamma_hat = partial_out_covariates(withx, config=TIGHT)
    # reference: joint OLS on [B X] (gamma block is identified)
    B = reference.incidence_dense(graph)
    full = np.column_stack([B, X])
    coef, *_ = np.linalg.lstsq(full, y, rcond=None)
    np.testing.assert_allclose(gamma_hat, coef[-2:], atol=1e-8)
    np.testing.assert_allclose(resid_y, y - X @ gamma_hat, atol=1e-12)


def test_partial_out_with_given_gamma(instance, rng):
    panel, graph, _, y = instance
    X = rng.standard_normal((graph.n, 1))
    withx = MatchedPanel(
        i=panel.i, t=panel.t, j=panel.j, y=y + 2.0 * X[:, 0], x=X, r=panel.r, c=panel.c
    )
    resid_y, gamma = partial_out_covariates(withx, gamma=np.array([2.0]))
    np.testing.assert_allclose(resid_y, y, atol=1e-12)
    np.testing.assert_array_equal(gamma, [2.0])


def test_partial_out_rejects_collinear_covariate(instance):
    panel, graph, _, y = instance
    # a column-unit dummy is absorbed by the fixed effects
    X = (panel.j == 1).astype(float)[:, None]
    withx = MatchedPanel(
        i=panel.i, t=panel.t, j=panel.j, y=y, x=X, r=panel.r, c=panel.c
    )
    with pytest.raises(ValueError, match="collinear"):
        partial_out_covariates(withx)


def test_mu_j_multiplicity_weights(instance, rng):
    _, graph, _, _ = instance
    alpha = rng.standard_normal(graph.r)
    got = mu_j(np.concatenate([alpha, np.zeros(graph.c)]), graph)
    want = np.zeros(graph.c)
    np.add.at(want, graph.j_idx, alpha[graph.i_idx])
    want /= graph.d_b
    np.testing.assert_allclose(got, want, atol=1e-13)


class TestHyperparams:
    def test_validation(self):
        with pytest.raises(ValueError):
            Hyperparams(lambda_a=-0.5)
        with pytest.raises(ValueError):
            Hyperparams(phi=1.2)

    def test_replace_and_equality(self):
        hp = Hyperparams(mu=0.1, lambda_a=1.0, lambda_b=2.0, phi=0.5)
        hp2 = hp.replace(phi=0.0)
        assert hp2.phi == 0.0 and hp2.lambda_a == 1.0
        assert hp == Hyperparams(mu=0.1, lambda_a=1.0, lambda_b=2.0, phi=0.5)
        assert hash(hp) == hash(hp.replace())


@settings(max_examples=25, deadline=None)
@given(
    mu=st.floats(-3, 3),
    lam_a=st.floats(1e-3, 1e3),
    lam_b=st.floats(1e-3, 1e3),
    phi=st.floats(-0.95, 0.95),
)
def test_posterior_normalization_property(mu, lam_a, lam_b, phi):
    rng = np.random.default_rng(99)
    _, graph = reference.random_connected_panel(rng, r=8, c=4)
    y = rng.standard_normal(graph.n)
    fit = posterior_mean(
        graph, y, Hyperparams(mu=mu, lambda_a=lam_a, lambda_b=lam_b, phi=phi),
        config=SolverConfig(rel_tol=1e-10),
    )
    assert abs(fit.beta_hat.sum()) < 1e-8
    assert np.all(np.isfinite(fit.theta))


class TestCovariateIndex:
    def test_design_matrix_is_block_diagonal(self):
        Z_a = np.arange(8.0).reshape(4, 2)
        Z_b = np.array([1.0, 2.0, 6.0])
        prior = CovariateIndex(Z_a=Z_a, Z_b=Z_b)
        Z = prior.design_matrix(4, 3)
        assert Z.shape == (7, 3)
        assert np.array_equal(Z[:4, :2], Z_a)
        assert np.allclose(Z[4:, 2], np.array([1.0, 2.0, 6.0]) - 3.0)
        assert not Z[:4, 2].any() and not Z[4:, :2].any()

    def test_beta_side_columns_are_centered(self):
        prior = CovariateIndex(Z_b=np.array([[3.0], [5.0], [10.0]]))
        assert prior.Z_b.mean() == pytest.approx(0.0, abs=1e-15)

    def test_vector_needs_coefficients(self):
        prior = CovariateIndex(Z_a=np.ones((4, 1)))
        with pytest.raises(ValueError, match="no coefficients"):
            prior.vector(4, 3)
        v = prior.with_delta([2.5]).vector(4, 3)
        assert np.allclose(v, np.concatenate([np.full(4, 2.5), np.zeros(3)]))

    def test_validation(self):
        with pytest.raises(ValueError, match="at least one"):
            CovariateIndex()
        with pytest.raises(ValueError, match="length"):
            CovariateIndex(Z_a=np.ones((4, 2)), delta=[1.0])
        with pytest.raises(ValueError, match="length"):
            CovariateIndex(Z_a=np.ones((4, 2))).with_delta([1.0, 2.0, 3.0])
        with pytest.raises(ValueError, match="rows"):
            CovariateIndex(Z_a=np.ones((4, 1))).design_matrix(5, 3)

    def test_one_dimensional_input_becomes_a_column(self):
        prior = CovariateIndex(Z_a=np.arange(5.0))
        assert prior.Z_a.shape == (5, 1)
        assert prior.k == 1 and prior.k_a == 1 and prior.k_b == 0

    def test_posterior_with_covariate_location_matches_dense(self, instance):
        panel, graph, theta, y = instance
        rng = np.random.default_rng(99)
        Z_a = np.column_stack([np.ones(graph.r), rng.normal(size=graph.r)])
        Z_b = rng.normal(size=(graph.c, 1))
        delta = np.array([0.4, -0.3, 0.8])
        prior = CovariateIndex(Z_a=Z_a, Z_b=Z_b, delta=delta)
        hp = Hyperparams(mu=0.0, lambda_a=1.3, lambda_b=0.5, phi=0.3)
        fit = posterior_mean(graph, y, hp, prior=prior, sigma2=0.12, config=TIGHT)

        B = reference.incidence_dense(graph)
        L = B.T @ B
        lam = reference.prior_precision_dense(graph, 1.3, 0.5, 0.3)
        v = prior.design_matrix(graph.r, graph.c) @ delta
        want = reference.normalizer_dense(graph.r, graph.c) @ (
            v + np.linalg.solve(L + lam, B.T @ y - L @ v)
        )
        got = np.concatenate([fit.alpha_hat, fit.beta_hat])
        assert np.allclose(got, want, rtol=1e-8, atol=1e-10)
