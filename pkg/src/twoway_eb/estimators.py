"""Point estimators for the two-way effects theta = (alpha, beta).

The normalization 1_c' beta = 0 is imposed throughout. All estimators are
rotations of solutions of shifted Laplacian systems: the restricted LS
estimator applies the normalizing map Rot to the minimum-norm solution of
L x = B'Y, and the posterior-mean family under the coupled Gaussian prior
applies the same map to v + (L + Lam*)^{-1} B'(Y - Bv). Special cases of
the prior scales (lam_a at 0 or infinity) have closed or simpler forms and
are dispatched on explicit limit flags rather than extreme floats.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .graph import BipartiteGraph, GraphError, MatchedPanel, build_graph, laplacian_apply, projected_laplacian
from .sparse_linalg import ShiftedPrecisionOperator, SolverConfig, cg_solve


class LimitFlag(enum.Enum):
    """Boundary states of the alpha-side precision scale."""

    ZERO = "zero"
    INFINITY = "infinity"


class Hyperparams:
    """Shrinkage hyperparameters (mu, lambda_a, lambda_b, phi).

    lambda_a and lambda_b are positive precision-to-noise ratios; lambda_a
    may instead be a LimitFlag for the boundary estimators (no shrinkage of
    alpha toward its location, or alpha pinned to it). phi is the prior
    cross-correlation coefficient, |phi| < 1. LimitFlag.INFINITY requires
    phi = 0.
    """

    __slots__ = ("mu", "lambda_a", "lambda_b", "phi")

    def __init__(self, mu=0.0, lambda_a=1.0, lambda_b=1.0, phi=0.0):
        if not np.isfinite(mu):
            raise ValueError("mu must be finite")
        if isinstance(lambda_a, LimitFlag):
            if lambda_a is LimitFlag.INFINITY and phi != 0.0:
                raise ValueError("lambda_a=infinity requires phi=0")
        else:
            lambda_a = float(lambda_a)
            if not (lambda_a > 0 and np.isfinite(lambda_a)):
                raise ValueError("lambda_a must be a positive finite real or a LimitFlag")
        lambda_b = float(lambda_b)
        if not (lambda_b > 0 and np.isfinite(lambda_b)):
            raise ValueError("lambda_b must be a positive finite real")
        if not abs(phi) < 1:
            raise ValueError("phi must satisfy |phi| < 1")
        self.mu = float(mu)
        self.lambda_a = lambda_a
        self.lambda_b = lambda_b
        self.phi = float(phi)

    def __repr__(self):
        la = self.lambda_a.value if isinstance(self.lambda_a, LimitFlag) else self.lambda_a
        return f"Hyperparams(mu={self.mu}, lambda_a={la}, lambda_b={self.lambda_b}, phi={self.phi})"

    def __eq__(self, other):
        if not isinstance(other, Hyperparams):
            return NotImplemented
        return (self.mu, self.lambda_a, self.lambda_b, self.phi) == (
            other.mu,
            other.lambda_a,
            other.lambda_b,
            other.phi,
        )

    def __hash__(self):
        return hash((self.mu, self.lambda_a, self.lambda_b, self.phi))

    def replace(self, **kw):
        base = {"mu": self.mu, "lambda_a": self.lambda_a, "lambda_b": self.lambda_b, "phi": self.phi}
        base.update(kw)
        return Hyperparams(**base)


class ConstantMu:
    """Prior location v = (mu 1_r', 0_c')': alpha shrinks to a common mean,
    beta to zero."""

    k = 1

    def vector(self, r: int, c: int, mu: float) -> np.ndarray:
        return np.concatenate([np.full(r, mu), np.zeros(c)])

    def design_matrix(self, r: int, c: int) -> np.ndarray:
        return np.concatenate([np.ones(r), np.zeros(c)])[:, None]

    def __repr__(self):
        return "ConstantMu()"


class CovariateIndex:
    """Prior location v = Z delta with block-diagonal Z from per-side
    covariates.

    Z_a is (r, k_a), Z_b is (c, k_b); either may be None. Columns of Z_b
    are centered on construction because the beta normalization leaves the
    column means of the beta-side location unidentified. delta, once set
    (directly or by a criterion concentration), has length k_a + k_b.
    """

    def __init__(self, Z_a=None, Z_b=None, delta=None):
        if Z_a is None and Z_b is None:
            raise ValueError("CovariateIndex needs at least one covariate block")
        self.Z_a = None if Z_a is None else np.atleast_2d(np.asarray(Z_a, dtype=np.float64))
        if self.Z_a is not None and self.Z_a.shape[0] == 1 and self.Z_a.size > 1:
            self.Z_a = self.Z_a.T
        self.Z_b = None if Z_b is None else np.atleast_2d(np.asarray(Z_b, dtype=np.float64))
        if self.Z_b is not None and self.Z_b.shape[0] == 1 and self.Z_b.size > 1:
            self.Z_b = self.Z_b.T
        if self.Z_b is not None:
            self.Z_b = self.Z_b - self.Z_b.mean(axis=0, keepdims=True)
        self.k_a = 0 if self.Z_a is None else self.Z_a.shape[1]
        self.k_b = 0 if self.Z_b is None else self.Z_b.shape[1]
        self.k = self.k_a + self.k_b
        self.delta = None
        if delta is not None:
            delta = np.asarray(delta, dtype=np.float64).ravel()
            if len(delta) != self.k:
                raise ValueError(f"delta must have length {self.k}, got {len(delta)}")
            self.delta = delta

    def design_matrix(self, r: int, c: int) -> np.ndarray:
        if self.Z_a is not None and self.Z_a.shape[0] != r:
            raise ValueError(f"Z_a has {self.Z_a.shape[0]} rows, graph has r={r}")
        if self.Z_b is not None and self.Z_b.shape[0] != c:
            raise ValueError(f"Z_b has {self.Z_b.shape[0]} rows, graph has c={c}")
        Z = np.zeros((r + c, self.k))
        if self.Z_a is not None:
            Z[:r, : self.k_a] = self.Z_a
        if self.Z_b is not None:
            Z[r:, self.k_a :] = self.Z_b
        return Z

    def vector(self, r: int, c: int, mu: float = 0.0) -> np.ndarray:
        if self.delta is None:
            raise ValueError(
                "CovariateIndex has no coefficients yet; set delta or select them "
                "with a risk criterion first"
            )
        return self.design_matrix(r, c) @ self.delta

    def with_delta(self, delta) -> "CovariateIndex":
        out = CovariateIndex.__new__(CovariateIndex)
        out.Z_a, out.Z_b = self.Z_a, self.Z_b
        out.k_a, out.k_b, out.k = self.k_a, self.k_b, self.k
        out.delta = np.asarray(delta, dtype=np.float64).ravel()
        if len(out.delta) != self.k:
            raise ValueError(f"delta must have length {self.k}, got {len(out.delta)}")
        return out

    def __repr__(self):
        return f"CovariateIndex(k_a={self.k_a}, k_b={self.k_b}, delta={'set' if self.delta is not None else 'unset'})"


@dataclass(frozen=True)
class EstimateResult:
    """Estimated effects plus provenance.

    normalization_check records 1_c' beta_hat; it should be at machine
    scale because every estimator ends with an explicit demeaning.
    """

    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    hyperparams: Hyperparams | None = None
    sigma2: float | None = None
    criterion_value: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "alpha_hat", np.asarray(self.alpha_hat, dtype=np.float64))
        object.__setattr__(self, "beta_hat", np.asarray(self.beta_hat, dtype=np.float64))
        self.alpha_hat.setflags(write=False)
        self.beta_hat.setflags(write=False)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.alpha_hat, self.beta_hat])

    @property
    def normalization_check(self) -> float:
        return float(self.beta_hat.sum())

    def fitted_values(self, graph: BipartiteGraph) -> np.ndarray:
        return graph.incidence_apply(self.theta)


def rotate_to_normalized(v: np.ndarray, r: int) -> np.ndarray:
    """Apply the normalizing map Rot: demean the beta block into the alpha
    block. Rot v = (v_a + mean(v_b), v_b - mean(v_b))."""
    out = np.array(v, dtype=np.float64, copy=True)
    if out.ndim == 1:
        m = out[r:].mean()
        out[:r] += m
        out[r:] -= m
    else:
        m = out[r:].mean(axis=0, keepdims=True)
        out[:r] += m
        out[r:] -= m
    return out


def rotate_transpose(v: np.ndarray, r: int) -> np.ndarray:
    """Rot' v = (v_a, (sum(v_a)/c) 1_c + v_b - mean(v_b))."""
    out = np.array(v, dtype=np.float64, copy=True)
    c = out.shape[0] - r
    if out.ndim == 1:
        out[r:] += out[:r].sum() / c - out[r:].mean()
    else:
        out[r:] += out[:r].sum(axis=0, keepdims=True) / c - out[r:].mean(axis=0, keepdims=True)
    return out


def _require_connected(graph: BipartiteGraph):
    n_comp = graph.num_components
    if n_comp > 1:
        raise GraphError(
            f"graph has {n_comp} connected components; effects are only comparable "
            "within one component. Extract the largest with extract_largest_component "
            "(CLI: --largest-component) and re-run."
        )
    if graph.c == 1:
        warnings.warn(
            "single column unit: the normalization forces beta = 0 and the model "
            "degrades to one-way estimation of alpha",
            stacklevel=3,
        )


def _check_y(graph: BipartiteGraph, Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != (graph.n,):
        raise ValueError(f"Y must have length n={graph.n}, got shape {Y.shape}")
    return Y


def minnorm_ls_solution(
    graph: BipartiteGraph, by: np.ndarray, config: SolverConfig | None = None
) -> tuple[np.ndarray, dict]:
    """Minimum-norm solution of L x = b for b orthogonal to the null
    direction q = (1_r', -1_c')'.

    Solved with CG on L + tau qhat qhat', which is positive definite and
    agrees with the pseudoinverse solve on the complement of q (the Krylov
    space never leaves it since both b and the operator respect the split).
    """
    config = config or SolverConfig()
    tau = float((graph.d_a.mean() + graph.d_b.mean()) / 2.0)
    op = ShiftedPrecisionOperator(graph, tau=tau)
    return cg_solve(op, by, config, diag=op.diagonal())


def ls_estimate(graph: BipartiteGraph, Y: np.ndarray, config: SolverConfig | None = None) -> EstimateResult:
    """Restricted least squares: the unique LS fit with 1_c' beta = 0."""
    _require_connected(graph)
    Y = _check_y(graph, Y)
    by = graph.incidence_T_apply(Y)
    x0, info = minnorm_ls_solution(graph, by, config)
    theta = rotate_to_normalized(x0, graph.r)
    beta = theta[graph.r :]
    beta = beta - beta.mean()  # exact demeaning against roundoff
    return EstimateResult(
        alpha_hat=theta[: graph.r],
        beta_hat=beta,
        diagnostics={"cg_iterations": info["iterations"], "cg_residual": float(info["relative_residuals"].max())},
    )


def sigma2_estimate(graph: BipartiteGraph, Y: np.ndarray, ls: EstimateResult | None = None) -> float:
    """Unbiased noise-variance estimate ||Y - B theta_ls||^2 / (n - r - c + 1)."""
    Y = _check_y(graph, Y)
    dof = graph.n - (graph.r + graph.c - 1)
    if dof <= 0:
        raise ValueError(
            f"cannot estimate the noise variance: n - (r + c - 1) = {dof} <= 0 "
            "degrees of freedom; supply sigma2 externally"
        )
    if ls is None:
        ls = ls_estimate(graph, Y)
    resid = Y - ls.fitted_values(graph)
    return float(resid @ resid / dof)


def posterior_mean(
    graph: BipartiteGraph,
    Y: np.ndarray,
    hyperparams: Hyperparams,
    prior: ConstantMu | CovariateIndex | None = None,
    sigma2: float | None = None,
    config: SolverConfig | None = None,
) -> EstimateResult:
    """Posterior mean of theta under the coupled Gaussian prior.

    Computed as Rot{v + (L + Lam*)^{-1} B'(Y - Bv)} with a single CG solve;
    sigma2 is recorded for provenance but does not move the point estimate
    (the prior is parametrized in precision-to-noise ratios).

    lambda_a = LimitFlag.INFINITY pins alpha to its prior location; the
    beta block then has the diagonal closed form of the one-way model.
    lambda_a = LimitFlag.ZERO leaves alpha unshrunk; the system stays
    positive definite on a connected graph and the same CG path applies.
    """
    _require_connected(graph)
    Y = _check_y(graph, Y)
    prior = prior or ConstantMu()
    r, c = graph.r, graph.c
    v = prior.vector(r, c, hyperparams.mu)

    if hyperparams.lambda_a is LimitFlag.INFINITY:
        lam_b = hyperparams.lambda_b
        net = Y - v[graph.i_idx]
        col_sums = np.bincount(graph.j_idx, weights=net, minlength=c)
        beta_tilde = (col_sums + lam_b * v[r:]) / (graph.d_b + lam_b)
        shift = beta_tilde.mean()
        return EstimateResult(
            alpha_hat=v[:r] + shift,
            beta_hat=beta_tilde - shift,
            hyperparams=hyperparams,
            sigma2=sigma2,
            criterion_value=None,
            diagnostics={"dispatch": "alpha_pinned_closed_form"},
        )

    lam_a = 0.0 if hyperparams.lambda_a is LimitFlag.ZERO else hyperparams.lambda_a
    op = ShiftedPrecisionOperator(graph, lam_a=lam_a, lam_b=hyperparams.lambda_b, phi=hyperparams.phi)
    rhs = graph.incidence_T_apply(Y)
    if np.any(v):
        rhs = rhs - laplacian_apply(graph, v)
    x, info = cg_solve(op, rhs, config or SolverConfig(), diag=op.diagonal())
    theta = rotate_to_normalized(v + x, r)
    beta = theta[r:]
    beta = beta - beta.mean()
    return EstimateResult(
        alpha_hat=theta[:r],
        beta_hat=beta,
        hyperparams=hyperparams,
        sigma2=sigma2,
        criterion_value=None,
        diagnostics={
            "dispatch": "cg",
            "cg_iterations": info["iterations"],
            "cg_residual": float(info["relative_residuals"].max()),
        },
    )


def one_way_shrink(graph: BipartiteGraph, Y: np.ndarray, lam_b: float) -> np.ndarray:
    """One-way shrinkage estimator of beta: demeaned ridge on the
    column-unit dummies, M_c (B2'B2 + lam_b I)^{-1} B2'Y.

    Ignores the alpha side entirely; this is the classical one-way
    value-added estimator. Closed form since B2'B2 is diagonal.
    """
    Y = _check_y(graph, Y)
    if lam_b < 0:
        raise ValueError("lam_b must be nonnegative")
    col_sums = np.bincount(graph.j_idx, weights=Y, minlength=graph.c)
    beta = col_sums / (graph.d_b + lam_b)
    return beta - beta.mean()


def projected_one_way_shrink(
    graph: BipartiteGraph,
    Y: np.ndarray,
    lam_b: float,
    config: SolverConfig | None = None,
    beta_ls: np.ndarray | None = None,
) -> np.ndarray:
    """One-way shrinkage applied inside the two-way model:
    M_c L2p (L2p + lam_b I)^{-1} beta_ls with L2p the projected Laplacian.

    Exact at every lam_b (not a limit): equals the posterior-mean beta
    block when the alpha side is unshrunk. lam_b = 0 returns the demeaned
    LS beta.
    """
    _require_connected(graph)
    Y = _check_y(graph, Y)
    if lam_b < 0:
        raise ValueError("lam_b must be nonnegative")
    if beta_ls is None:
        beta_ls = ls_estimate(graph, Y, config).beta_hat
    if lam_b == 0.0:
        return beta_ls - beta_ls.mean()
    l2p = projected_laplacian(graph)
    shifted = l2p + lam_b * sp.eye(graph.c, format="csr")
    cfg = config or SolverConfig()
    sol, _ = cg_solve(lambda v: shifted @ v, beta_ls, cfg, diag=shifted.diagonal())
    beta = l2p @ sol
    return beta - beta.mean()


def oneway_sigma2(graph: BipartiteGraph, Y: np.ndarray) -> float:
    """Residual variance of the one-way (column means) fit, dof n - c."""
    Y = _check_y(graph, Y)
    dof = graph.n - graph.c
    if dof <= 0:
        raise ValueError(
            f"one-way residual variance needs n > c, got n={graph.n}, c={graph.c}"
        )
    col_means = np.bincount(graph.j_idx, weights=Y, minlength=graph.c) / graph.d_b
    resid = Y - col_means[graph.j_idx]
    return float(resid @ resid / dof)


def moment_lambda_b(graph: BipartiteGraph, Y: np.ndarray, sigma2: float) -> float:
    """Method-of-moments shrinkage intensity for the one-way estimator.

    The cross-sectional variance of the per-column LS means overstates the
    signal variance by the average sampling noise sigma2 / dbar; the
    implied intensity is lam_b = sigma2 / signal variance.
    """
    Y = _check_y(graph, Y)
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    col_means = np.bincount(graph.j_idx, weights=Y, minlength=graph.c) / graph.d_b
    if graph.c < 2:
        raise ValueError("need at least two column units to estimate the signal variance")
    dbar = float(graph.d_b.mean())
    signal_var = float(np.var(col_means, ddof=1)) - sigma2 / dbar
    if sigma2 == 0.0:
        return 0.0
    if signal_var <= 0:
        raise ValueError(
            "implied signal variance is nonpositive; the column effects are "
            "statistically indistinguishable from noise (use full shrinkage)"
        )
    return sigma2 / signal_var


def partial_out_covariates(
    panel: MatchedPanel,
    gamma: np.ndarray | None = None,
    config: SolverConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Remove covariate effects from the outcomes: Y = Y* - X gamma_hat.

    With gamma=None the coefficients come from the joint two-way fixed
    effects OLS, computed by double residualization: Y* and each column of
    X are replaced by their residuals from the fixed-effects fit, then
    gamma_hat is the OLS of one on the other. Valid under strict
    exogeneity; for sequentially exogenous regressors supply gamma
    externally. Returns (Y, gamma_hat).
    """
    Y_star = np.asarray(panel.y, dtype=np.float64)
    if panel.x is None or panel.x.shape[1] == 0:
        return Y_star.copy(), np.zeros(0)
    X = panel.x
    if gamma is not None:
        gamma = np.asarray(gamma, dtype=np.float64).ravel()
        if len(gamma) != X.shape[1]:
            raise ValueError(f"gamma must have length {X.shape[1]}, got {len(gamma)}")
        return Y_star - X @ gamma, gamma

    graph = build_graph(panel)
    _require_connected(graph)

    def fe_resid(col):
        fit = ls_estimate(graph, col, config)
        return col - fit.fitted_values(graph)

    ry = fe_resid(Y_star)
    rx = np.column_stack([fe_resid(X[:, k]) for k in range(X.shape[1])])
    # a column absorbed by the fixed effects leaves only solver noise behind,
    # so its residual norm must be judged against the original column scale
    cfg = config or SolverConfig()
    col_scale = np.maximum(np.linalg.norm(X, axis=0), 1.0)
    floor = max(rx.shape) * max(100.0 * cfg.rel_tol, 1e3 * np.finfo(float).eps)
    absorbed = set(np.flatnonzero(np.linalg.norm(rx, axis=0) <= floor * col_scale))
    qmat, rmat, piv = scipy.linalg.qr(rx, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rmat))
    tol = max(rx.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    bad = absorbed | {int(piv[k]) for k in range(rank, rx.shape[1])}
    if bad:
        raise ValueError(
            f"covariate columns {sorted(k + 1 for k in bad)} are collinear with the "
            "fixed-effects design (or with earlier columns) after projection; drop them"
        )
    gamma_hat = scipy.linalg.solve_triangular(rmat, qmat.T @ ry)
    gamma_hat = gamma_hat[np.argsort(piv)]
    return Y_star - X @ gamma_hat, gamma_hat


def mu_j(theta_or_result, graph: BipartiteGraph) -> np.ndarray:
    """Average matched row-unit effect per column unit, weighted by match
    multiplicity: mu_j = (1/d_b,j) sum over observations with column j of
    alpha_i."""
    if isinstance(theta_or_result, EstimateResult):
        alpha = theta_or_result.alpha_hat
    else:
        theta = np.asarray(theta_or_result, dtype=np.float64)
        alpha = theta[: graph.r] if theta.shape[0] == graph.r + graph.c else theta
    if alpha.shape[0] != graph.r:
        raise ValueError(f"alpha must have length r={graph.r}")
    sums = np.bincount(graph.j_idx, weights=alpha[graph.i_idx], minlength=graph.c)
    return sums / graph.d_b
