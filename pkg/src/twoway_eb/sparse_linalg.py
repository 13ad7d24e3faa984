"""Matrix-free linear algebra for shifted graph Laplacians.

Everything here operates on L + P where L = B'B is the (singular) two-way
Laplacian and P is a symmetric positive semidefinite precision shift built
from per-side scales (lam_a, lam_b) and a cross-correlation coefficient phi.
For |phi| < 1 and lam_a, lam_b >= 0 the sum is positive definite whenever
the graph is connected and at least one scale is positive (or an explicit
rank-correction tau q q-hat' is added for the pure least-squares case).

The conjugate gradient solver is written by hand because the workload is
many simultaneous right-hand sides against one operator: probe vectors for
stochastic trace estimation plus a handful of structured vectors, all
sharing matvecs. SciPy's cg handles one rhs per call and cannot batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .graph import BipartiteGraph, laplacian_apply, normalized_adjacency_apply


class SolverError(RuntimeError):
    """CG failed to reach tolerance; carries the worst relative residual."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolverConfig:
    """Iterative solver and trace estimation settings.

    rel_tol is on ||r_k|| / ||b|| per column; max_iter of 0 means the
    dimension-scaled default 10 (r + c). num_probes and probe_kind control
    Hutchinson trace estimation; probe_seed makes it reproducible.
    """

    rel_tol: float = 1e-10
    max_iter: int = 0
    num_probes: int = 64
    probe_kind: str = "gaussian"
    probe_seed: int = 0

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")
        if self.num_probes < 1:
            raise ValueError("num_probes must be at least 1")
        if self.probe_kind not in ("gaussian", "rademacher"):
            raise ValueError(f"unknown probe_kind {self.probe_kind!r}")

    def iterations_for(self, dim: int) -> int:
        return self.max_iter if self.max_iter else 10 * dim


@dataclass
class ShiftedPrecisionOperator:
    """Matrix-free L + Lam* where Lam* couples the two sides through phi.

    Lam* = Lam^{1/2} (I - phi N) Lam^{1/2} with Lam = diag(lam_a I_r,
    lam_b I_c) and N the normalized adjacency. Either scale may be zero
    (the coupling vanishes with it); an optional rank-one term
    tau q-hat q-hat' with q = (1_r', -1_c')' restores definiteness when
    both scales are zero, without affecting solutions orthogonal to q.
    """

    graph: BipartiteGraph
    lam_a: float = 0.0
    lam_b: float = 0.0
    phi: float = 0.0
    tau: float = 0.0
    _sqrt_lam: np.ndarray = field(init=False, repr=False)
    _qhat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.lam_a < 0 or self.lam_b < 0:
            raise ValueError("precision scales must be nonnegative")
        if not abs(self.phi) < 1:
            raise ValueError("cross-correlation coefficient must lie in (-1, 1)")
        if self.phi != 0.0 and (self.lam_a == 0.0 or self.lam_b == 0.0):
            # the coupling block carries sqrt(lam_a lam_b), so it vanishes here;
            # normalizing phi to zero keeps shift_apply/as_sparse/diagonal aligned
            self.phi = 0.0
        r, c = self.graph.r, self.graph.c
        self._sqrt_lam = np.concatenate(
            [np.full(r, np.sqrt(self.lam_a)), np.full(c, np.sqrt(self.lam_b))]
        )
        q = np.concatenate([np.ones(r), -np.ones(c)])
        self._qhat = q / np.linalg.norm(q)

    @property
    def dim(self) -> int:
        return self.graph.r + self.graph.c

    def shift_apply(self, v: np.ndarray) -> np.ndarray:
        """Lam* v (no Laplacian, no rank-one term)."""
        s = self._sqrt_lam if v.ndim == 1 else self._sqrt_lam[:, None]
        w = s * v
        if self.phi != 0.0:
            w = w - self.phi * normalized_adjacency_apply(self.graph, w)
        return s * w

    def __call__(self, v: np.ndarray) -> np.ndarray:
        out = laplacian_apply(self.graph, v) + self.shift_apply(v)
        if self.tau != 0.0:
            coef = self._qhat @ v
            out = out + self.tau * (self._qhat[:, None] * coef if v.ndim > 1 else self._qhat * coef)
        return out

    def diagonal(self) -> np.ndarray:
        """Exact diagonal (the normalized adjacency has none)."""
        d = np.concatenate(
            [self.graph.d_a + self.lam_a, self.graph.d_b + self.lam_b]
        ).astype(np.float64)
        if self.tau != 0.0:
            d = d + self.tau * self._qhat**2
        return d

    def as_sparse(self) -> sp.csr_matrix:
        """Materialize the operator (for direct factorization)."""
        g = self.graph
        # L = B'B has +A off the diagonal (both effects add into the outcome),
        # so its null vector is (1_r', -1_c')', not the all-ones vector
        lap = sp.bmat(
            [[sp.diags(g.d_a.astype(float)), g.adj], [g.adj_T, sp.diags(g.d_b.astype(float))]],
            format="csr",
        )
        out = lap + sp.diags(np.concatenate([np.full(g.r, self.lam_a), np.full(g.c, self.lam_b)]))
        if self.phi != 0.0:
            sa, sb = g._inv_sqrt_d
            cross = sp.diags(sa) @ g.adj @ sp.diags(sb)
            coef = self.phi * np.sqrt(self.lam_a * self.lam_b)
            out = out - coef * sp.bmat([[None, cross], [cross.T, None]], format="csr")
        if self.tau != 0.0:
            out = out + self.tau * sp.csr_matrix(np.outer(self._qhat, self._qhat))
        return out.tocsr()


def cg_solve(
    operator,
    b: np.ndarray,
    config: SolverConfig | None = None,
    diag: np.ndarray | None = None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Preconditioned conjugate gradients with blocked right-hand sides.

    operator maps (dim, m) arrays to (dim, m) arrays and must be symmetric
    positive definite on the span of interest. b may be a vector or a
    (dim, m) block; columns converge independently (finished columns are
    frozen and masked out of the iteration). diag supplies a Jacobi
    preconditioner; pass None to run unpreconditioned.

    Returns (x, info) where info holds per-column relative residuals and
    the iteration count. Raises SolverError if any column stalls above
    tolerance or produces non-finite values.
    """
    config = config or SolverConfig()
    single = b.ndim == 1
    B = b[:, None] if single else b
    B = np.ascontiguousarray(B, dtype=np.float64)
    dim, m = B.shape
    bnorm = np.linalg.norm(B, axis=0)
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    inv_diag = None
    if diag is not None:
        if np.any(diag <= 0):
            raise ValueError("preconditioner diagonal must be positive")
        inv_diag = (1.0 / diag)[:, None]

    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=np.float64, copy=True).reshape(dim, m)
    R = B - operator(X) if x0 is not None else B.copy()
    Z = inv_diag * R if inv_diag is not None else R.copy()
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    tol = config.rel_tol * bnorm
    resid = np.linalg.norm(R, axis=0)
    active = resid > tol
    max_iter = config.iterations_for(dim)
    it = 0
    while np.any(active) and it < max_iter:
        it += 1
        cols = np.flatnonzero(active)
        Pa = P[:, cols]
        APa = operator(Pa)
        pAp = np.einsum("ij,ij->j", Pa, APa)
        if not np.all(np.isfinite(pAp)) or np.any(pAp <= 0):
            raise SolverError(
                "conjugate gradient breakdown: operator not positive definite on a search direction",
                residual=float(np.max(resid / bnorm)),
                iterations=it,
            )
        alpha = rz[cols] / pAp
        X[:, cols] += alpha * Pa
        R[:, cols] -= alpha * APa
        Rc = R[:, cols]
        Zc = inv_diag * Rc if inv_diag is not None else Rc
        rz_new = np.einsum("ij,ij->j", Rc, Zc)
        beta = rz_new / rz[cols]
        P[:, cols] = Zc + beta * Pa
        rz[cols] = rz_new
        resid[cols] = np.linalg.norm(Rc, axis=0)
        if not np.all(np.isfinite(resid[cols])):
            raise SolverError(
                "conjugate gradient produced non-finite residuals",
                residual=None,
                iterations=it,
            )
        active[cols] = resid[cols] > tol[cols]
    rel = resid / bnorm
    if np.any(active):
        raise SolverError(
            f"conjugate gradient did not converge in {it} iterations "
            f"(worst relative residual {rel.max():.2e}, tolerance {config.rel_tol:.0e})",
            residual=float(rel.max()),
            iterations=it,
        )
    info = {"iterations": it, "relative_residuals": rel.copy()}
    return (X[:, 0] if single else X), info


def draw_probes(dim: int, num: int, kind: str = "gaussian", seed: int = 0) -> np.ndarray:
    """(dim, num) probe matrix for stochastic trace estimation."""
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        return rng.standard_normal((dim, num))
    if kind == "rademacher":
        return rng.integers(0, 2, size=(dim, num)).astype(np.float64) * 2.0 - 1.0
    raise ValueError(f"unknown probe kind {kind!r}")


@dataclass(frozen=True)
class TraceEstimate:
    """Stochastic trace estimate with its per-probe samples."""

    value: float
    per_probe: np.ndarray
    num_probes: int

    @property
    def std_error(self) -> float:
        if self.num_probes < 2:
            return float("nan")
        return float(np.std(self.per_probe, ddof=1) / np.sqrt(self.num_probes))


def hutchinson_trace(quadratic_form, probes: np.ndarray) -> TraceEstimate:
    """Estimate tr[Q] from samples z'Qz over the columns of probes.

    quadratic_form maps the (dim, J) probe block to the length-J vector of
    quadratic forms (so the caller can batch solves). With standard normal
    or Rademacher probes the estimate is unbiased.
    """
    vals = np.asarray(quadratic_form(probes), dtype=np.float64)
    if vals.shape != (probes.shape[1],):
        raise ValueError("quadratic_form must return one value per probe column")
    return TraceEstimate(value=float(vals.mean()), per_probe=vals, num_probes=probes.shape[1])


def logdet_shifted(op: ShiftedPrecisionOperator, dense_threshold: int = 2000) -> tuple[float, float]:
    """(log det(L + Lam*), log det(Lam*)) for positive definite Lam*.

    Requires lam_a > 0 and lam_b > 0. Small problems use dense Cholesky
    (which detects indefiniteness); larger ones use a sparse LU whose
    pivots carry the determinant since both matrices are positive definite.
    log det(Lam*) splits into r log lam_a + c log lam_b + log det(I - phi N).
    """
    if op.lam_a <= 0 or op.lam_b <= 0:
        raise ValueError("log-determinant requires strictly positive precision scales")
    g = op.graph
    r, c = g.r, g.c

    shifted = op.as_sparse()
    if op.phi != 0.0:
        sa, sb = g._inv_sqrt_d
        cross = sp.diags(sa) @ g.adj @ sp.diags(sb)
        eye_min = sp.eye(r + c) - op.phi * sp.bmat(
            [[None, cross], [cross.T, None]], format="csr"
        )
    else:
        eye_min = sp.eye(r + c, format="csr")

    def _logdet(mat: sp.csr_matrix) -> float:
        if mat.shape[0] <= dense_threshold:
            chol = np.linalg.cholesky(mat.toarray())  # raises LinAlgError if not PD
            return float(2.0 * np.log(np.diag(chol)).sum())
        lu = splu(mat.tocsc(), permc_spec="COLAMD", diag_pivot_thresh=0.0)
        diag_u = lu.U.diagonal()
        if np.any(diag_u <= 0):
            raise SolverError("sparse factorization hit a nonpositive pivot")
        return float(np.log(diag_u).sum())

    logdet_sum = _logdet(shifted)
    logdet_shift = r * np.log(op.lam_a) + c * np.log(op.lam_b) + _logdet(sp.csr_matrix(eye_min))
    return logdet_sum, logdet_shift
