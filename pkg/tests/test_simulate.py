"""Synthetic data generation and the Monte Carlo experiment harness."""

import numpy as np
import pytest

from twoway_eb import (
    DESIGNS,
    DesignParams,
    GridSpec,
    WeightSpec,
    build_graph,
    empirical_moments,
    generate_design,
    parse_dist,
    quintile_crosstab,
    run_experiment,
    run_replication,
)

TINY = DesignParams(
    r=60, c=12, s=4, T=2, pi_match=0.4, pi_mob=0.25,
    alpha_dist=("gaussian", 0.6), beta_dist=("gaussian", 0.06), sigma2=0.12,
)

ONE_POINT = GridSpec(
    lambda_a=(1.0,), lambda_b=(1.0,), phi=(0.0,), mu=0.0, refine_rounds=0
)


class TestParseDist:
    def test_string_forms(self):
        assert parse_dist("gaussian(0.6)") == ("gaussian", 0.6)
        assert parse_dist("student_t(3, 0.14)") == ("student_t", 3.0, 0.14)
        assert parse_dist(" exponential( 0.775 ) ") == ("exponential", 0.775)

    def test_tuple_form_passes_through(self):
        assert parse_dist(("gaussian", 0.5)) == ("gaussian", 0.5)

    @pytest.mark.parametrize(
        "bad",
        ["gauss(1)", "gaussian()", "gaussian(-1)", "student_t(2, 0.1)", "student_t(3)", "cauchy(1)"],
    )
    def test_rejects_malformed(self, bad):
        with pytest.raises(ValueError):
            parse_dist(bad)


class TestDesignParams:
    def test_school_count_must_divide_units(self):
        with pytest.raises(ValueError, match="divide"):
            DesignParams(r=10, c=4, s=3)

    def test_from_config_variance_shorthand(self):
        p = DesignParams.from_config(
            {"r": 40, "c": 8, "s": 4, "sigma_alpha2": 0.5, "sigma_beta2": 0.05}
        )
        assert p.alpha_dist == ("gaussian", 0.5)
        assert p.beta_dist == ("gaussian", 0.05)

    def test_from_config_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown design keys"):
            DesignParams.from_config({"r": 40, "c": 8, "s": 4, "mobility": 0.1})

    def test_preset_table(self):
        assert set(DESIGNS) == {
            "1", "2", "3", "4", "1-wab", "t-beta", "exp-beta", "exp-alpha"
        }
        assert DESIGNS["2"].pi_match == 0.7
        assert DESIGNS["3"].pi_mob == 0.12
        # design 4 swaps the variance roles
        assert DESIGNS["4"].alpha_dist == ("gaussian", 0.06)
        assert DESIGNS["4"].beta_dist == ("gaussian", 0.6)
        assert DESIGNS["t-beta"].beta_dist[1] == 3.0


class TestGenerateDesign:
    def test_panel_shape_and_balance(self):
        theta, panel = generate_design(TINY, seed=1)
        assert theta.shape == (TINY.r + TINY.c,)
        assert panel.n == TINY.r * TINY.T
        # every row unit appears exactly once per period
        for t in range(1, TINY.T + 1):
            ids = panel.i[panel.t == t]
            assert len(np.unique(ids)) == TINY.r

    def test_beta_demeaned_outcome_equation_holds(self):
        theta, panel = generate_design(TINY, seed=2)
        beta = theta[TINY.r :]
        assert abs(beta.mean()) < 1e-12
        resid = panel.y - theta[panel.i - 1] - beta[panel.j - TINY.r - 1 + TINY.r]
        # residuals are the drawn noise: mean ~ 0, variance ~ sigma2
        assert abs(resid.mean()) < 5 * np.sqrt(TINY.sigma2 / panel.n)
        assert abs(np.var(resid) - TINY.sigma2) < 0.05

    def test_same_seed_reproduces(self):
        t1, p1 = generate_design(TINY, seed=9)
        t2, p2 = generate_design(TINY, seed=9)
        np.testing.assert_array_equal(t1, t2)
        np.testing.assert_array_equal(p1.j, p2.j)
        np.testing.assert_array_equal(p1.y, p2.y)
        _, p3 = generate_design(TINY, seed=10)
        assert not np.array_equal(p1.j, p3.j)

    def test_no_mobility_gives_one_component_per_school(self):
        params = DesignParams(r=60, c=12, s=4, T=3, pi_mob=0.0)
        _, panel = generate_design(params, seed=3)
        graph = build_graph(panel)
        assert graph.num_components == params.s

    def test_perfect_sorting_aligns_ranks(self):
        # pi_match = 1 with no mobility: top-quintile students meet
        # top-quintile teachers, so the matched correlation is strong
        params = DesignParams(r=200, c=40, s=4, T=1, pi_match=1.0, pi_mob=0.0)
        theta, panel = generate_design(params, seed=4)
        _, _, cor = empirical_moments(theta[:200], theta[200:], panel)
        assert cor > 0.5

    def test_mobility_mixes_components(self):
        params = DesignParams(r=60, c=12, s=4, T=2, pi_mob=0.5)
        _, panel = generate_design(params, seed=5)
        assert build_graph(panel).num_components < 4


class TestEmpiricalMoments:
    def test_hand_computed(self):
        theta, panel = generate_design(TINY, seed=6)
        alpha, beta = theta[: TINY.r], theta[TINY.r :]
        va, vb, cor = empirical_moments(alpha, beta, panel)
        a = alpha[panel.i - 1]
        b = beta[panel.j - 1]
        assert va == pytest.approx(np.var(a, ddof=1))
        assert vb == pytest.approx(np.var(b, ddof=1))
        assert cor == pytest.approx(np.corrcoef(a, b)[0, 1])

    def test_degenerate_variance_gives_nan_cor(self):
        _, panel = generate_design(TINY, seed=7)
        va, vb, cor = empirical_moments(
            np.zeros(TINY.r), np.arange(TINY.c, dtype=float), panel
        )
        assert va == 0.0 and np.isnan(cor)


class TestQuintileCrosstab:
    def test_self_table_is_diagonal(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal(25)
        table = quintile_crosstab(v, v)
        assert table.sum() == 25
        np.testing.assert_array_equal(table, np.diag([5, 5, 5, 5, 5]))

    def test_marginals_are_balanced(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(40), rng.standard_normal(40)
        table = quintile_crosstab(a, b)
        np.testing.assert_array_equal(table.sum(axis=0), 8)
        np.testing.assert_array_equal(table.sum(axis=1), 8)

    def test_needs_five_units(self):
        with pytest.raises(ValueError, match="at least 5"):
            quintile_crosstab(np.ones(4), np.ones(4))


class TestRunReplication:
    def test_record_contents(self):
        rec = run_replication(
            TINY, seed=11,
            estimators=("ls", "eb_ure", "eb_1way", "oracle"),
            grid=ONE_POINT, weight=WeightSpec("beta"),
        )
        for key in (
            "r_used", "c_used", "n_used", "kept_fraction", "sigma2_hat",
            "var_alpha", "var_beta_matched", "cor_true",
            "rmse_ls", "rmse_ure", "rmse_oneway", "rmse_oracle",
            "lambda_a_ure", "lambda_b_ure", "phi_ure", "mu_ure",
            "lambda_b_1way", "cor_hat_ls", "cor_hat_ure",
        ):
            assert key in rec, key
        assert 0 < rec["kept_fraction"] <= 1.0
        assert rec["sigma2_hat"] > 0
        assert rec["rmse_ls"] > 0
        # single-point grid: the selected scales echo the grid
        assert rec["lambda_a_ure"] == 1.0 and rec["lambda_b_ure"] == 1.0

    def test_oracle_never_loses_on_shared_grid(self):
        grid = GridSpec.coarse(refine_rounds=0, phi=(0.0,))
        rec = run_replication(
            TINY, seed=12, estimators=("ls", "eb_ure", "oracle"),
            grid=grid, weight=WeightSpec("beta"),
        )
        assert rec["rmse_oracle"] <= rec["rmse_ure"] + 1e-12

    def test_keep_vectors(self):
        rec = run_replication(
            TINY, seed=13, estimators=("ls", "eb_1way"), weight=WeightSpec("beta"),
            keep_vectors=True,
        )
        vecs = rec["_vectors"]
        dim = rec["r_used"] + rec["c_used"]
        assert vecs["theta_true"].shape == (dim,)
        assert vecs["theta_ls"].shape == (dim,)
        assert vecs["theta_1way"].shape == (dim,)


class TestRunExperiment:
    def test_report_round_trip(self, tmp_path):
        report = run_experiment(
            TINY, n_reps=3, estimators=("ls", "eb_1way"),
            weight=WeightSpec("beta"), seed=21, progress=False,
        )
        assert len(report.reps) == 3
        assert report.failures == []
        med = report.median("rmse_ls")
        assert med > 0
        assert report.share(lambda rec: rec["rmse_ls"] > 0) == 1.0
        summary = report.summary()
        assert summary["n_completed"] == 3
        assert summary["n_failed"] == 0
        assert summary["medians"]["rmse_ls"] == med

        csv_path = tmp_path / "reps.csv"
        report.to_csv(csv_path)
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 4  # header + 3 reps
        assert lines[0].startswith("rep,")

        scatter = tmp_path / "scatter.csv"
        report.scatter_csv(scatter)
        head = scatter.read_text().splitlines()[0]
        assert "beta_true" in head and "beta_1way" in head

    def test_reproducible_across_runs(self):
        a = run_experiment(
            TINY, n_reps=2, estimators=("ls",), weight=WeightSpec("beta"),
            seed=5, progress=False,
        )
        b = run_experiment(
            TINY, n_reps=2, estimators=("ls",), weight=WeightSpec("beta"),
            seed=5, progress=False,
        )
        assert a.column("rmse_ls").tolist() == b.column("rmse_ls").tolist()
        assert a.column("sigma2_hat").tolist() == b.column("sigma2_hat").tolist()
