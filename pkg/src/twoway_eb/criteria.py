"""Risk criteria for choosing the shrinkage hyperparameters.

Three ways to score a point in the hyperparameter family: an unbiased
estimate of the frequentist compound risk (no knowledge of theta needed),
the Gaussian marginal likelihood, and the oracle loss itself (simulation
only). All three reduce to quadratic forms in solutions of (L + Lam*)
systems, so a ShrinkageProblem instance caches everything that does not
change across evaluations: B'Y, the minimum-norm LS solution, probe
matrices, and the lambda-free dense factorizations.

Risk is measured through a diagonal weighting W. The unbiased estimate is
evaluated in its computational form

    2 sigma^2 tr[W^{1/2} Rot (L+Lam*)^{-1} Rot' W^{1/2}]
      + (v - theta_ls)' S' W S (v - theta_ls),

which differs from the estimand-level definition by the lambda-free
constant sigma^2 tr[W L^-] (the LS risk); both the raw value and the
constant-adjusted value are reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .estimators import (
    ConstantMu,
    CovariateIndex,
    EstimateResult,
    Hyperparams,
    LimitFlag,
    minnorm_ls_solution,
    rotate_to_normalized,
    rotate_transpose,
)
from .graph import BipartiteGraph, GraphError
from .sparse_linalg import ShiftedPrecisionOperator, SolverConfig, cg_solve, draw_probes, logdet_shifted

EXACT_TRACE_LIMIT = 2000


@dataclass(frozen=True)
class WeightSpec:
    """Diagonal risk weighting over the r+c effects.

    all: every effect weighted 1/(r+c). beta: column effects only, 1/c.
    alpha: row effects only, 1/r. Each has unit trace.
    """

    kind: str = "all"

    KINDS = ("all", "beta", "alpha")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"weight kind must be one of {self.KINDS}, got {self.kind!r}")

    def diagonal(self, r: int, c: int) -> np.ndarray:
        if self.kind == "all":
            return np.full(r + c, 1.0 / (r + c))
        if self.kind == "beta":
            return np.concatenate([np.zeros(r), np.full(c, 1.0 / c)])
        return np.concatenate([np.full(r, 1.0 / r), np.zeros(c)])

    def inner(self, u: np.ndarray, v: np.ndarray, r: int, c: int) -> float:
        return float(u @ (self.diagonal(r, c) * v))


def compound_loss(theta_hat, theta, weight: WeightSpec, r: int | None = None) -> float:
    """Weighted quadratic loss (theta_hat - theta)' W (theta_hat - theta).

    Accepts EstimateResult or raw stacked vectors; raw vectors need r to
    locate the alpha/beta split.
    """
    if isinstance(theta_hat, EstimateResult):
        r = len(theta_hat.alpha_hat)
        theta_hat = theta_hat.theta
    if isinstance(theta, EstimateResult):
        r = len(theta.alpha_hat)
        theta = theta.theta
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if theta_hat.shape != theta.shape:
        raise ValueError(f"shape mismatch: {theta_hat.shape} vs {theta.shape}")
    if r is None:
        raise ValueError("r is required when passing raw vectors")
    diff = theta_hat - theta
    c = len(diff) - r
    return weight.inner(diff, diff, r, c)


@dataclass(frozen=True)
class CriterionValue:
    """One criterion evaluation: the number to minimize plus an audit trail.

    value is the computational-form criterion used by the optimizer.
    components carries the additive pieces, the lambda-free constant
    (the LS risk sigma^2 tr[W L^-]) when it was computed, and
    value_unbiased = value - constant, the estimand-level risk estimate.
    """

    value: float
    components: dict
    trace_mode: str
    num_probes: int | None = None
    probe_seed: int | None = None

    @property
    def value_unbiased(self) -> float:
        return self.components.get("value_unbiased", float("nan"))


class ShrinkageProblem:
    """One dataset prepared for repeated criterion evaluation.

    Holds the graph, outcomes, noise variance, and solver settings, plus
    caches: B'Y, the minimum-norm LS solution and its rotation, probe
    matrices keyed by (count, seed), and for small problems the dense
    machinery for exact traces. Criterion evaluations at distinct
    hyperparameters may run concurrently; caches are filled before the
    fan-out (all lazily built state is derived once from immutable data).
    """

    def __init__(
        self,
        graph: BipartiteGraph,
        Y: np.ndarray,
        sigma2: float | None = None,
        solver: SolverConfig | None = None,
    ):
        if graph.num_components > 1:
            raise GraphError(
                f"graph has {graph.num_components} connected components; extract the "
                "largest with extract_largest_component (CLI: --largest-component)"
            )
        self.graph = graph
        self.Y = np.asarray(Y, dtype=np.float64)
        if self.Y.shape != (graph.n,):
            raise ValueError(f"Y must have length n={graph.n}")
        self.solver = solver or SolverConfig()
        self._sigma2 = sigma2
        self._cache: dict = {}

    # -- cached data products ------------------------------------------------

    @property
    def r(self) -> int:
        return self.graph.r

    @property
    def c(self) -> int:
        return self.graph.c

    @property
    def dim(self) -> int:
        return self.graph.r + self.graph.c

    def _get(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def by(self) -> np.ndarray:
        return self._get("by", lambda: self.graph.incidence_T_apply(self.Y))

    @property
    def minnorm(self) -> np.ndarray:
        """Minimum-norm solution x0 of L x = B'Y (perpendicular to the null
        direction)."""

        def build():
            x0, _ = minnorm_ls_solution(self.graph, self.by, self.solver)
            return x0

        return self._get("minnorm", build)

    @property
    def theta_ls(self) -> np.ndarray:
        return self._get("theta_ls", lambda: rotate_to_normalized(self.minnorm, self.r))

    @property
    def sigma2(self) -> float:
        if self._sigma2 is None:
            resid = self.Y - self.graph.incidence_apply(self.theta_ls)
            dof = self.graph.n - (self.r + self.c - 1)
            if dof <= 0:
                raise ValueError(
                    "cannot estimate sigma2 from a saturated panel; supply it explicitly"
                )
            self._sigma2 = float(resid @ resid / dof)
        return self._sigma2

    def probes(self, num: int | None = None, seed: int | None = None) -> np.ndarray:
        num = self.solver.num_probes if num is None else num
        seed = self.solver.probe_seed if seed is None else seed
        key = ("probes", num, seed, self.solver.probe_kind)
        return self._get(key, lambda: draw_probes(self.dim, num, self.solver.probe_kind, seed))

    @property
    def exact_capable(self) -> bool:
        return self.dim <= EXACT_TRACE_LIMIT

    @property
    def _dense_rot(self) -> np.ndarray:
        def build():
            r, c, dim = self.r, self.c, self.dim
            R = np.eye(dim)
            R[:r, r:] += 1.0 / c
            R[r:, r:] -= 1.0 / c
            return R

        return self._get("dense_rot", build)

    @property
    def _dense_ls_factor(self):
        """Cholesky factor of the deflation-augmented Laplacian (dense)."""

        def build():
            op = ShiftedPrecisionOperator(
                self.graph, tau=float((self.graph.d_a.mean() + self.graph.d_b.mean()) / 2.0)
            )
            return scipy.linalg.cho_factor(op.as_sparse().toarray())

        return self._get("dense_ls_factor", build)

    def weighted_rot_columns(self, weight: WeightSpec) -> tuple[np.ndarray, np.ndarray]:
        """(M, w): M = Rot' W^{1/2} restricted to the nonzero-weight columns,
        with w the corresponding diagonal entries."""

        def build():
            wdiag = weight.diagonal(self.r, self.c)
            nz = np.flatnonzero(wdiag > 0)
            M = self._dense_rot.T[:, nz] * np.sqrt(wdiag[nz])[None, :]
            return M, wdiag[nz]

        return self._get(("rot_cols", weight.kind), build)

    def probe_columns(self, weight: WeightSpec, probes: np.ndarray) -> np.ndarray:
        """Rot' W^{1/2} z for each probe column z (for stochastic traces)."""
        sqrt_w = np.sqrt(weight.diagonal(self.r, self.c))
        return rotate_transpose(sqrt_w[:, None] * probes, self.r)

    def ls_risk(
        self, weight: WeightSpec, trace_mode: str, probes: np.ndarray | None = None
    ) -> float:
        """The lambda-free constant sigma^2 tr[W L^-] (also the LS risk).

        Computed as sigma^2 tr[M' pinv(L) M] with M = Rot' W^{1/2}; columns
        of M are orthogonal to the null direction, so the augmented solve
        returns pseudoinverse solutions exactly.
        """
        if trace_mode == "exact":
            key = ("ls_risk_exact", weight.kind)

            def build():
                M, _ = self.weighted_rot_columns(weight)
                sol = scipy.linalg.cho_solve(self._dense_ls_factor, M)
                return float(np.einsum("ij,ij->", M, sol))

            return self.sigma2 * self._get(key, build)
        if probes is None:
            probes = self.probes()
        # key on the probe content, not the config seed: callers may pass
        # probe matrices drawn with their own seeds
        key = ("ls_risk_hutch", weight.kind, probes.shape[1], hash(probes.tobytes()))

        def build_h():
            mz = self.probe_columns(weight, probes)
            tau = float((self.graph.d_a.mean() + self.graph.d_b.mean()) / 2.0)
            op = ShiftedPrecisionOperator(self.graph, tau=tau)
            sol, _ = cg_solve(op, mz, self.solver, diag=op.diagonal())
            return float(np.einsum("ij,ij->j", mz, sol).mean())

        return self.sigma2 * self._get(key, build_h)

    # -- shrinkage building blocks --------------------------------------------

    def shrink_operator(self, hp: Hyperparams) -> ShiftedPrecisionOperator:
        if isinstance(hp.lambda_a, LimitFlag):
            raise ValueError(
                "criterion evaluation needs interior hyperparameters; limit flags "
                "are only for the boundary estimators"
            )
        return ShiftedPrecisionOperator(
            self.graph, lam_a=hp.lambda_a, lam_b=hp.lambda_b, phi=hp.phi
        )

    def posterior_from_minnorm(self, hp: Hyperparams, v: np.ndarray, solve) -> np.ndarray:
        """theta_hat(lambda) given a solver for (L+Lam*) systems: the shrunk
        estimate Rot{theta_ls - solve(Lam* (x0 - v))}."""
        op = self.shrink_operator(hp)
        h = solve(op.shift_apply(self.minnorm - v))
        return rotate_to_normalized(self.theta_ls - rotate_to_normalized(h, self.r), self.r)


def _resolve_location(problem: ShrinkageProblem, hp: Hyperparams, prior) -> np.ndarray:
    prior = prior or ConstantMu()
    return prior.vector(problem.r, problem.c, hp.mu)


def _trace_mode(problem: ShrinkageProblem, trace_mode: str) -> str:
    if trace_mode == "auto":
        return "exact" if problem.exact_capable else "hutchinson"
    if trace_mode == "exact" and not problem.exact_capable:
        raise ValueError(
            f"exact trace mode is limited to r+c <= {EXACT_TRACE_LIMIT} "
            f"(problem has {problem.dim}); use hutchinson or auto"
        )
    if trace_mode not in ("exact", "hutchinson"):
        raise ValueError(f"unknown trace mode {trace_mode!r}")
    return trace_mode


def ure(
    problem: ShrinkageProblem,
    hp: Hyperparams,
    prior: ConstantMu | CovariateIndex | None = None,
    weight: WeightSpec = WeightSpec("all"),
    trace_mode: str = "auto",
    probes: np.ndarray | None = None,
) -> CriterionValue:
    """Unbiased risk estimate at one hyperparameter point (computational form).

    value = 2 sigma^2 tr[W^{1/2} Rot (L+Lam*)^{-1} Rot' W^{1/2}]
            + (v - theta_ls)' S' W S (v - theta_ls);
    components carry the trace and quadratic pieces, the LS-risk constant,
    and value_unbiased = value - constant (the estimand-level estimate whose
    expectation is the true compound risk).
    """
    mode = _trace_mode(problem, trace_mode)
    r, c = problem.r, problem.c
    sigma2 = problem.sigma2
    v = _resolve_location(problem, hp, prior)
    op = problem.shrink_operator(hp)

    if mode == "exact":
        dense = op.as_sparse().toarray()
        factor = scipy.linalg.cho_factor(dense)
        M, _ = problem.weighted_rot_columns(weight)
        sol = scipy.linalg.cho_solve(factor, M)
        trace_term = 2.0 * sigma2 * float(np.einsum("ij,ij->", M, sol))
        g = op.shift_apply(v - problem.theta_ls)
        s_applied = rotate_to_normalized(scipy.linalg.cho_solve(factor, g), r)
        quad = weight.inner(s_applied, s_applied, r, c)
        constant = problem.ls_risk(weight, "exact")
        num_probes = None
        seed = None
    else:
        if probes is None:
            probes = problem.probes()
        mz = problem.probe_columns(weight, probes)
        g = op.shift_apply(v - problem.theta_ls)
        rhs = np.column_stack([mz, g])
        sol, _ = cg_solve(op, rhs, problem.solver, diag=op.diagonal())
        trace_term = 2.0 * sigma2 * float(np.einsum("ij,ij->j", mz, sol[:, :-1]).mean())
        s_applied = rotate_to_normalized(sol[:, -1], r)
        quad = weight.inner(s_applied, s_applied, r, c)
        constant = problem.ls_risk(weight, "hutchinson", probes)
        num_probes = probes.shape[1]
        seed = problem.solver.probe_seed

    value = trace_term + quad
    return CriterionValue(
        value=value,
        components={
            "trace_term": trace_term,
            "quad_term": quad,
            "ls_risk_constant": constant,
            "value_unbiased": value - constant,
        },
        trace_mode=mode,
        num_probes=num_probes,
        probe_seed=seed,
    )


def marginal_neg_loglik(
    problem: ShrinkageProblem,
    hp: Hyperparams,
    prior: ConstantMu | CovariateIndex | None = None,
) -> CriterionValue:
    """Negative marginal log-likelihood criterion (up to lambda-free terms).

    value = sigma^2 [log det(L + Lam*) - log det(Lam*)] + x' P x with
    x = x0 - v and P = Lam* - Lam* (L+Lam*)^{-1} Lam*. Requires interior
    hyperparameters (the log-determinant of Lam* must be finite).
    """
    v = _resolve_location(problem, hp, prior)
    op = problem.shrink_operator(hp)
    ld_sum, ld_shift = logdet_shifted(op)
    x = problem.minnorm - v
    gx = op.shift_apply(x)
    h, _ = cg_solve(op, gx, problem.solver, diag=op.diagonal())
    quad = float(x @ gx - gx @ h)
    value = problem.sigma2 * (ld_sum - ld_shift) + quad
    return CriterionValue(
        value=value,
        components={"logdet_term": problem.sigma2 * (ld_sum - ld_shift), "quad_term": quad},
        trace_mode="exact",
    )


def oracle_loss_curve(
    problem: ShrinkageProblem,
    theta_true: np.ndarray,
    points,
    weight: WeightSpec = WeightSpec("all"),
) -> list[tuple[Hyperparams, float]]:
    """Compound loss of the posterior mean at each hyperparameter point.

    Simulation-only (needs the true effects). Returns (point, loss) pairs in
    input order; the minimizer is the oracle choice on that grid.
    """
    theta_true = np.asarray(theta_true, dtype=np.float64)
    if theta_true.shape != (problem.dim,):
        raise ValueError(f"theta_true must have length {problem.dim}")
    out = []
    for hp in points:
        v = _resolve_location(problem, hp, None)
        op = problem.shrink_operator(hp)
        h, _ = cg_solve(
            op, op.shift_apply(problem.minnorm - v), problem.solver, diag=op.diagonal()
        )
        theta_hat = problem.theta_ls - rotate_to_normalized(h, problem.r)
        loss = compound_loss(theta_hat, theta_true, weight, problem.r)
        out.append((hp, loss))
    return out
