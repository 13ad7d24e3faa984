"""Hyperparameter selection by grid search with analytic location handling.

The criteria are quadratic in the location parameters (the common prior
mean mu of the row effects, or the coefficient vector delta of a covariate
index), so those are concentrated out in closed form at every scale point
(lambda_a, lambda_b, phi). The scale point itself is chosen by exhaustive
search over a log grid with optional local refinement, the reference
optimizer throughout: criterion surfaces are cheap per point, shaped by a
common random probe matrix, and not reliably convex.

One evaluation point shares a single blocked CG solve across everything it
needs: the probe columns for the stochastic trace, Lam* applied to the
location design, and Lam* applied to the minimum-norm LS solution. The
unbiased-risk, marginal-likelihood, and oracle-loss values all come out of
that one solve, which is what makes Monte Carlo experiments affordable.
"""

from __future__ import annotations

import itertools
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .criteria import CriterionValue, ShrinkageProblem, WeightSpec, _trace_mode
from .estimators import ConstantMu, CovariateIndex, Hyperparams, rotate_to_normalized
from .sparse_linalg import SolverError, cg_solve, logdet_shifted


def _log_axis(lo: float, hi: float, num: int) -> tuple:
    return tuple(float(v) for v in np.geomspace(lo, hi, num))


@dataclass(frozen=True)
class GridSpec:
    """Search grid over the scale hyperparameters.

    lambda axes are log-spaced in (0, inf); phi is linear in (-1, 1). mu is
    either the string "concentrated" (closed-form per point) or a fixed
    float. Each refinement round re-grids a bracket around the incumbent
    argmin with refine_density times the local density.
    """

    lambda_a: tuple = field(default_factory=lambda: _log_axis(1e-3, 1e3, 25))
    lambda_b: tuple = field(default_factory=lambda: _log_axis(1e-3, 1e3, 25))
    phi: tuple = field(default_factory=lambda: tuple(np.linspace(-0.9, 0.9, 15)))
    mu: str | float = "concentrated"
    refine_rounds: int = 1
    refine_density: int = 3

    def __post_init__(self):
        for name in ("lambda_a", "lambda_b", "phi"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"{name} grid is empty")
            object.__setattr__(self, name, vals)
        if any(v <= 0 or not np.isfinite(v) for v in self.lambda_a + self.lambda_b):
            raise ValueError("lambda grids must be positive and finite")
        if any(not abs(p) < 1 for p in self.phi):
            raise ValueError("phi grid must lie inside (-1, 1)")
        if isinstance(self.mu, str):
            if self.mu != "concentrated":
                raise ValueError("mu must be 'concentrated' or a number")
        else:
            object.__setattr__(self, "mu", float(self.mu))
        if self.refine_rounds < 0 or self.refine_density < 1:
            raise ValueError("refine_rounds must be >= 0 and refine_density >= 1")

    def points(self):
        return itertools.product(self.lambda_a, self.lambda_b, self.phi)

    @classmethod
    def coarse(cls, **kw):
        """Smaller grid used by the Monte Carlo experiment harness."""
        defaults = dict(
            lambda_a=_log_axis(1e-3, 1e3, 7),
            lambda_b=_log_axis(1e-3, 1e3, 7),
            phi=tuple(np.linspace(-0.9, 0.9, 5)),
        )
        defaults.update(kw)
        return cls(**defaults)


def _refined_axis(values: tuple, best: float, density: int, log_scale: bool) -> tuple:
    """Bracket the incumbent between its grid neighbors and re-grid the
    bracket at `density` times the local density."""
    vals = sorted(values)
    if len(vals) == 1:
        return (vals[0],)
    idx = int(np.argmin([abs(v - best) for v in vals]))
    lo = vals[max(idx - 1, 0)]
    hi = vals[min(idx + 1, len(vals) - 1)]
    if lo == hi:
        return (lo,)
    num = 2 * density + 1
    if log_scale:
        return tuple(float(v) for v in np.geomspace(lo, hi, num))
    return tuple(float(v) for v in np.linspace(lo, hi, num))


@dataclass
class SelectionResult:
    """Outcome of a criterion minimization over a grid."""

    criterion: str
    hyperparams: Hyperparams
    value: float
    mu: float | None
    delta: np.ndarray | None
    weight_kind: str
    n_points: int
    n_solves: int
    wall_time: float
    surface: list | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """JSON-ready summary (wall time excluded: outputs must be
        byte-stable across reruns)."""
        hp = self.hyperparams
        return {
            "criterion": self.criterion,
            "lambda_a": hp.lambda_a if not hasattr(hp.lambda_a, "value") else str(hp.lambda_a.value),
            "lambda_b": hp.lambda_b,
            "phi": hp.phi,
            "mu": self.mu,
            "delta": None if self.delta is None else [float(d) for d in self.delta],
            "value": self.value,
            "weight": self.weight_kind,
            "n_points": self.n_points,
            "n_solves": self.n_solves,
            "failed_points": self.diagnostics.get("failed_points", 0),
        }


def _concentrate_quadratic(a: float, b: float, c0: float, bound: float | None):
    """Minimize a x^2 - 2 b x + c0; returns (argmin, min value). Degenerate
    curvature falls back to x = 0."""
    if not np.isfinite(a) or a <= 0:
        return None, c0
    x = b / a
    if bound is not None:
        x = float(np.clip(x, -bound, bound))
    return x, a * x * x - 2.0 * b * x + c0


def _concentrate_normal_equations(G: np.ndarray, rhs: np.ndarray, c0: float):
    """Minimize d'Gd - 2 d'rhs + c0 over vectors d; ridge fallback on
    singular G."""
    try:
        delta = np.linalg.solve(G, rhs)
        if not np.all(np.isfinite(delta)):
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        warnings.warn("location normal equations singular; ridge-regularizing", stacklevel=3)
        delta = np.linalg.solve(G + 1e-10 * np.eye(len(G)), rhs)
    return delta, float(c0 - rhs @ delta)


class _PointContext:
    """Immutable precomputed state shared by all grid-point evaluations."""

    def __init__(
        self,
        problem: ShrinkageProblem,
        weight: WeightSpec,
        prior,
        want: set,
        trace_mode: str,
        theta_true: np.ndarray | None,
        probes: np.ndarray | None,
        mu_mode,
    ):
        self.problem = problem
        self.weight = weight
        self.prior = prior or ConstantMu()
        self.want = want
        self.mode = _trace_mode(problem, trace_mode)
        self.theta_true = theta_true
        self.mu_mode = mu_mode
        self.r, self.c = problem.r, problem.c
        self.wdiag = weight.diagonal(self.r, self.c)
        self.x0 = problem.minnorm
        self.theta_ls = problem.theta_ls
        self.sigma2 = problem.sigma2
        self.Z = self.prior.design_matrix(self.r, self.c)
        self.concentrated = mu_mode == "concentrated"
        self.is_scalar_mu = isinstance(self.prior, ConstantMu)
        self.mu_bound = 10.0 * float(np.std(problem.Y)) if self.is_scalar_mu else None
        if "ure" in want and self.mode == "hutchinson":
            self.probes = probes if probes is not None else problem.probes()
            self.mz = problem.probe_columns(weight, self.probes)
            self.ls_risk = problem.ls_risk(weight, "hutchinson", self.probes)
        elif "ure" in want:
            self.probes = None
            self.mz = None
            self.ls_risk = problem.ls_risk(weight, "exact")
        else:
            self.probes = None
            self.mz = None
            self.ls_risk = None
        if self.mode == "exact" and "ure" in want:
            self.M, _ = problem.weighted_rot_columns(weight)
        else:
            self.M = None

    def w_inner(self, u, v) -> float:
        return float(u @ (self.wdiag * v))


def _evaluate_point(ctx: _PointContext, la: float, lb: float, ph: float) -> dict:
    """Evaluate every requested criterion at one scale point with one
    blocked solve. Returns a record with per-criterion (value, mu, delta)."""
    problem = ctx.problem
    hp = Hyperparams(mu=0.0, lambda_a=la, lambda_b=lb, phi=ph)
    op = problem.shrink_operator(hp)
    k = ctx.Z.shape[1]
    gz = op.shift_apply(ctx.Z)
    gx = op.shift_apply(ctx.x0)

    rhs_blocks = [gz, gx[:, None]]
    n_trace = 0
    if "ure" in ctx.want and ctx.mode == "hutchinson":
        rhs_blocks.insert(0, ctx.mz)
        n_trace = ctx.mz.shape[1]
    rhs = np.concatenate(rhs_blocks, axis=1)

    if ctx.mode == "exact":
        dense = op.as_sparse().toarray()
        factor = scipy.linalg.cho_factor(dense)
        sol = scipy.linalg.cho_solve(factor, rhs)
        n_solves = rhs.shape[1]
    else:
        sol, _ = cg_solve(op, rhs, problem.solver, diag=op.diagonal())
        n_solves = rhs.shape[1]

    h_z = sol[:, n_trace : n_trace + k]
    h_x = sol[:, n_trace + k]

    record = {"lambda_a": la, "lambda_b": lb, "phi": ph, "n_solves": n_solves}

    if "ure" in ctx.want:
        if ctx.mode == "exact":
            tr_sol = scipy.linalg.cho_solve(factor, ctx.M)
            trace_term = 2.0 * ctx.sigma2 * float(np.einsum("ij,ij->", ctx.M, tr_sol))
            record["n_solves"] += ctx.M.shape[1]
        else:
            tr = sol[:, :n_trace]
            trace_term = 2.0 * ctx.sigma2 * float(np.einsum("ij,ij->j", ctx.mz, tr).mean())
        SZ = rotate_to_normalized(h_z, ctx.r)
        Sx = rotate_to_normalized(h_x, ctx.r)
        G = SZ.T @ (ctx.wdiag[:, None] * SZ)
        bvec = SZ.T @ (ctx.wdiag * Sx)
        c0 = ctx.w_inner(Sx, Sx)
        mu, delta, quad = _minimize_location(ctx, G, bvec, c0)
        value = trace_term + quad
        record["ure"] = {
            "value": value,
            "value_unbiased": value - ctx.ls_risk,
            "trace_term": trace_term,
            "quad_term": quad,
            "mu": mu,
            "delta": delta,
        }

    if "mle" in ctx.want:
        ld_sum, ld_shift = logdet_shifted(op)
        # P = Lam* - Lam*(L+Lam*)^{-1}Lam*; quadratic pieces via the shared solves
        ZPx = ctx.Z.T @ gx - gz.T @ h_x
        ZPZ = ctx.Z.T @ gz - gz.T @ h_z
        xPx = float(ctx.x0 @ gx - gx @ h_x)
        mu, delta, quad = _minimize_location(ctx, ZPZ, ZPx, xPx)
        value = ctx.sigma2 * (ld_sum - ld_shift) + quad
        record["mle"] = {
            "value": value,
            "logdet_term": ctx.sigma2 * (ld_sum - ld_shift),
            "quad_term": quad,
            "mu": mu,
            "delta": delta,
        }

    if "oracle" in ctx.want:
        SZ = rotate_to_normalized(h_z, ctx.r)
        base = ctx.theta_ls - rotate_to_normalized(h_x, ctx.r) - ctx.theta_true
        G = SZ.T @ (ctx.wdiag[:, None] * SZ)
        bvec = -(SZ.T @ (ctx.wdiag * base))
        c0 = ctx.w_inner(base, base)
        mu, delta, loss = _minimize_location(ctx, G, bvec, c0)
        record["oracle"] = {"value": loss, "mu": mu, "delta": delta}

    return record


def _minimize_location(ctx: _PointContext, G, bvec, c0):
    """Concentrate the location parameter given the quadratic pieces,
    honoring the grid's mu mode. Returns (mu, delta, minimized value)."""
    if not ctx.concentrated:
        mu = float(ctx.mu_mode)
        if ctx.is_scalar_mu:
            a, b = float(G[0, 0]), float(bvec[0])
            return mu, None, a * mu * mu - 2.0 * b * mu + c0
        raise ValueError("fixed mu only applies to the constant-location prior")
    if ctx.is_scalar_mu:
        a, b = float(G[0, 0]), float(bvec[0])
        mu, val = _concentrate_quadratic(a, b, c0, ctx.mu_bound)
        if mu is None:
            warnings.warn(
                "location curvature vanished at a grid point; using mu = 0", stacklevel=4
            )
            mu = 0.0
        return mu, None, val
    delta, val = _concentrate_normal_equations(G, bvec, c0)
    return None, delta, val


def sweep(
    problem: ShrinkageProblem,
    grid: GridSpec,
    weight: WeightSpec = WeightSpec("all"),
    prior=None,
    want: set | frozenset = frozenset({"ure"}),
    theta_true: np.ndarray | None = None,
    trace_mode: str = "auto",
    threads: int = 1,
    probes: np.ndarray | None = None,
) -> tuple[dict, list, dict]:
    """Evaluate the requested criteria over the grid (with refinement).

    Returns (best, records, meta): best maps criterion name to its argmin
    record, records is every evaluation in deterministic order, meta counts
    points, solves, and failures. Refinement rounds re-grid around the
    incumbent argmin of each requested criterion and evaluate the union.
    """
    want = frozenset(want)
    if "oracle" in want:
        if theta_true is None:
            raise ValueError("oracle evaluation needs theta_true")
        theta_true = np.asarray(theta_true, dtype=np.float64)
    ctx = _PointContext(problem, weight, prior, want, trace_mode, theta_true, probes, grid.mu)

    records: dict[tuple, dict] = {}
    order: list[tuple] = []
    failures: list[dict] = []

    def run_batch(points):
        todo = [p for p in points if p not in records]
        if not todo:
            return

        def one(p):
            try:
                return p, _evaluate_point(ctx, *p)
            except SolverError as exc:
                return p, {"error": str(exc), "lambda_a": p[0], "lambda_b": p[1], "phi": p[2]}

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, todo))
        else:
            results = [one(p) for p in todo]
        for p, rec in results:
            records[p] = rec
            order.append(p)
            if "error" in rec:
                failures.append(rec)

    axes = {
        "lambda_a": tuple(grid.lambda_a),
        "lambda_b": tuple(grid.lambda_b),
        "phi": tuple(grid.phi),
    }
    run_batch(list(itertools.product(axes["lambda_a"], axes["lambda_b"], axes["phi"])))

    def argmin_point(criterion):
        # iterating in sorted key order makes strict < a lexicographic tie-break
        best_key, best_val = None, np.inf
        for p in sorted(records):
            rec = records[p]
            if criterion in rec:
                v = rec[criterion]["value"]
                if np.isfinite(v) and v < best_val:
                    best_key, best_val = p, v
        return best_key

    for _ in range(grid.refine_rounds):
        new_points = set()
        for criterion in want:
            p = argmin_point(criterion)
            if p is None:
                continue
            ref_a = _refined_axis(axes["lambda_a"], p[0], grid.refine_density, log_scale=True)
            ref_b = _refined_axis(axes["lambda_b"], p[1], grid.refine_density, log_scale=True)
            ref_p = _refined_axis(axes["phi"], p[2], grid.refine_density, log_scale=False)
            new_points.update(itertools.product(ref_a, ref_b, ref_p))
        run_batch(sorted(new_points))

    best = {}
    for criterion in want:
        p = argmin_point(criterion)
        if p is None:
            raise SolverError(
                f"every grid point failed for criterion {criterion!r}; "
                f"first failure: {failures[0]['error'] if failures else 'none recorded'}"
            )
        best[criterion] = records[p]
    meta = {
        "n_points": len(records),
        "n_solves": int(sum(rec.get("n_solves", 0) for rec in records.values())),
        "failed_points": len(failures),
        "failures": failures,
    }
    return best, [records[p] for p in order], meta


def _result_from_record(
    criterion: str, rec: dict, weight: WeightSpec, meta: dict, wall: float, surface
) -> SelectionResult:
    entry = rec[criterion]
    mu = entry.get("mu")
    hp = Hyperparams(
        mu=0.0 if mu is None else mu,
        lambda_a=rec["lambda_a"],
        lambda_b=rec["lambda_b"],
        phi=rec["phi"],
    )
    return SelectionResult(
        criterion=criterion,
        hyperparams=hp,
        value=entry["value"],
        mu=mu,
        delta=entry.get("delta"),
        weight_kind=weight.kind,
        n_points=meta["n_points"],
        n_solves=meta["n_solves"],
        wall_time=wall,
        surface=surface,
        diagnostics={"failed_points": meta["failed_points"]},
    )


def select(
    problem: ShrinkageProblem,
    criterion: str = "ure",
    grid: GridSpec | None = None,
    weight: WeightSpec = WeightSpec("all"),
    prior=None,
    trace_mode: str = "auto",
    threads: int = 1,
    keep_surface: bool = False,
) -> SelectionResult:
    """Minimize a data-driven criterion ('ure' or 'mle') over the grid."""
    if criterion not in ("ure", "mle"):
        raise ValueError(f"criterion must be 'ure' or 'mle', got {criterion!r}")
    grid = grid or GridSpec()
    start = time.perf_counter()
    best, records, meta = sweep(
        problem, grid, weight, prior, want={criterion}, trace_mode=trace_mode, threads=threads
    )
    wall = time.perf_counter() - start
    surface = records if keep_surface else None
    return _result_from_record(criterion, best[criterion], weight, meta, wall, surface)


def select_oracle(
    problem: ShrinkageProblem,
    theta_true: np.ndarray,
    grid: GridSpec | None = None,
    weight: WeightSpec = WeightSpec("all"),
    prior=None,
    threads: int = 1,
    keep_surface: bool = False,
) -> SelectionResult:
    """Minimize the true compound loss over the grid (simulation only)."""
    grid = grid or GridSpec()
    start = time.perf_counter()
    best, records, meta = sweep(
        problem,
        grid,
        weight,
        prior,
        want={"oracle"},
        theta_true=theta_true,
        trace_mode="auto",
        threads=threads,
    )
    wall = time.perf_counter() - start
    surface = records if keep_surface else None
    return _result_from_record("oracle", best["oracle"], weight, meta, wall, surface)


def _scale_only(hp_or_triple) -> tuple:
    if isinstance(hp_or_triple, Hyperparams):
        return hp_or_triple.lambda_a, hp_or_triple.lambda_b, hp_or_triple.phi
    la, lb, ph = hp_or_triple
    return float(la), float(lb), float(ph)


def concentrate_mu_ure(
    problem: ShrinkageProblem,
    hp_scale,
    weight: WeightSpec = WeightSpec("all"),
) -> float:
    """Closed-form risk-minimizing prior mean at a fixed scale point:
    mu = (vt' S' W S theta_ls) / (vt' S' W S vt) with vt the all-ones
    alpha-side direction. Falls back to 0 (with a warning) when the
    curvature vanishes."""
    la, lb, ph = _scale_only(hp_scale)
    vt = np.concatenate([np.ones(problem.r), np.zeros(problem.c)])
    op = problem.shrink_operator(Hyperparams(0.0, la, lb, ph))
    rhs = np.column_stack([op.shift_apply(vt), op.shift_apply(problem.minnorm)])
    sol, _ = cg_solve(op, rhs, problem.solver, diag=op.diagonal())
    Sv = rotate_to_normalized(sol[:, 0], problem.r)
    Sx = rotate_to_normalized(sol[:, 1], problem.r)
    wdiag = weight.diagonal(problem.r, problem.c)
    a = float(Sv @ (wdiag * Sv))
    b = float(Sv @ (wdiag * Sx))
    if not np.isfinite(a) or a <= 0:
        warnings.warn("shrinkage map annihilates the location direction; mu = 0", stacklevel=2)
        return 0.0
    return b / a


def concentrate_delta_ure(
    problem: ShrinkageProblem,
    hp_scale,
    prior: CovariateIndex,
    weight: WeightSpec = WeightSpec("all"),
) -> np.ndarray:
    """Normal-equations generalization of the scalar location formula:
    solves (Z'S'WS Z) delta = Z'S'WS theta_ls (ridge fallback when
    singular)."""
    la, lb, ph = _scale_only(hp_scale)
    Z = prior.design_matrix(problem.r, problem.c)
    op = problem.shrink_operator(Hyperparams(0.0, la, lb, ph))
    rhs = np.column_stack([op.shift_apply(Z), op.shift_apply(problem.minnorm)])
    sol, _ = cg_solve(op, rhs, problem.solver, diag=op.diagonal())
    SZ = rotate_to_normalized(sol[:, :-1], problem.r)
    Sx = rotate_to_normalized(sol[:, -1], problem.r)
    wdiag = weight.diagonal(problem.r, problem.c)
    G = SZ.T @ (wdiag[:, None] * SZ)
    bvec = SZ.T @ (wdiag * Sx)
    delta, _ = _concentrate_normal_equations(G, bvec, 0.0)
    return delta


def concentrate_mu_mle(problem: ShrinkageProblem, hp_scale) -> float:
    """Closed-form likelihood-maximizing prior mean at a fixed scale point,
    from the same quadratic-in-mu structure with P = Lam*(L+Lam*)^{-1}L."""
    la, lb, ph = _scale_only(hp_scale)
    vt = np.concatenate([np.ones(problem.r), np.zeros(problem.c)])
    op = problem.shrink_operator(Hyperparams(0.0, la, lb, ph))
    gv = op.shift_apply(vt)
    gx = op.shift_apply(problem.minnorm)
    sol, _ = cg_solve(op, np.column_stack([gv, gx]), problem.solver, diag=op.diagonal())
    den = float(vt @ gv - gv @ sol[:, 0])
    num = float(vt @ gx - gv @ sol[:, 1])
    if not np.isfinite(den) or den <= 0:
        warnings.warn("likelihood curvature in mu vanished; mu = 0", stacklevel=2)
        return 0.0
    return num / den
