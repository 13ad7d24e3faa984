"""Bipartite graph structures for matched two-way panel data.

A matched panel records which column unit (teacher, firm) each row unit
(student, worker) is paired with in each period. Stacking the observations
gives the incidence matrix B = [B1 B2], whose Laplacian L = B'B drives
identification: the number of zero eigenvalues of L equals the number of
connected components, and the size of the smallest nonzero eigenvalues
measures how fragile the least-squares problem is.

B is never materialized. It is stored as two index arrays (one row-unit
index and one column-unit index per observation) plus the r x c cross
block B1'B2 of match multiplicities, which is all any operator needs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph


class PanelError(ValueError):
    """Raised for malformed panel input (duplicate keys, bad ids, non-finite outcomes)."""


class GraphError(ValueError):
    """Raised for structural graph problems (zero-degree units, disconnectedness)."""


class EigenSolverError(RuntimeError):
    """Eigensolver failed to converge; carries the best residual reached."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


@dataclass(frozen=True)
class MatchedPanel:
    """Raw matched observations.

    i, t, j are 1-based integer id arrays of equal length n; y holds the
    outcomes and x optionally holds an (n, k) covariate block. r, c, T are
    the unit/period counts (defaulting to the maxima of the id columns).
    """

    i: np.ndarray
    t: np.ndarray
    j: np.ndarray
    y: np.ndarray
    x: np.ndarray | None = None
    r: int = 0
    c: int = 0
    T: int = 0

    def __post_init__(self):
        i = np.asarray(self.i, dtype=np.int64)
        t = np.asarray(self.t, dtype=np.int64)
        j = np.asarray(self.j, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.float64)
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "y", y)
        if not (len(i) == len(t) == len(j) == len(y)):
            raise PanelError("i, t, j, y must have equal length")
        if len(i) == 0:
            raise PanelError("empty panel")
        if self.x is not None:
            x = np.asarray(self.x, dtype=np.float64)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != len(i):
                raise PanelError("covariate block row count does not match panel length")
            if not np.all(np.isfinite(x)):
                raise PanelError("non-finite covariate values")
            object.__setattr__(self, "x", x)
        if not self.r:
            object.__setattr__(self, "r", int(i.max()))
        if not self.c:
            object.__setattr__(self, "c", int(j.max()))
        if not self.T:
            object.__setattr__(self, "T", int(t.max()))
        if i.min() < 1 or i.max() > self.r:
            bad = int(i[(i < 1) | (i > self.r)][0])
            raise PanelError(f"row-unit id {bad} outside 1..{self.r}")
        if j.min() < 1 or j.max() > self.c:
            bad = int(j[(j < 1) | (j > self.c)][0])
            raise PanelError(f"column-unit id {bad} outside 1..{self.c}")
        if t.min() < 1 or t.max() > self.T:
            bad = int(t[(t < 1) | (t > self.T)][0])
            raise PanelError(f"period {bad} outside 1..{self.T}")
        if not np.all(np.isfinite(y)):
            raise PanelError("non-finite outcome values")
        # each (i, t) may appear at most once
        key = i * np.int64(self.T + 1) + t
        uniq, counts = np.unique(key, return_counts=True)
        if np.any(counts > 1):
            k = uniq[np.argmax(counts > 1)]
            raise PanelError(
                f"duplicate observation for (i={int(k // (self.T + 1))}, t={int(k % (self.T + 1))})"
            )

    @property
    def n(self) -> int:
        return len(self.i)


def read_panel_csv(path) -> MatchedPanel:
    """Read a panel from CSV with header columns i,t,j,y[,x1,x2,...]."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:4] != ["i", "t", "j", "y"]:
            raise PanelError(f"{path}: header must start with i,t,j,y (got {header[:4]})")
        xcols = header[4:]
        rows = list(reader)
    if not rows:
        raise PanelError(f"{path}: no data rows")
    try:
        data = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise PanelError(f"{path}: non-numeric cell ({exc})") from None
    if data.shape[1] != len(header):
        raise PanelError(f"{path}: ragged rows")
    ids = data[:, :3]
    if not np.all(ids == np.round(ids)):
        raise PanelError(f"{path}: i, t, j must be integers")
    x = data[:, 4:] if xcols else None
    return MatchedPanel(
        i=ids[:, 0].astype(np.int64),
        t=ids[:, 1].astype(np.int64),
        j=ids[:, 2].astype(np.int64),
        y=data[:, 3],
        x=x,
    )


def write_panel_csv(panel: MatchedPanel, path) -> None:
    """Inverse of read_panel_csv (used by the simulation CLI)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        k = 0 if panel.x is None else panel.x.shape[1]
        writer.writerow(["i", "t", "j", "y"] + [f"x{q + 1}" for q in range(k)])
        for row in range(panel.n):
            rec = [int(panel.i[row]), int(panel.t[row]), int(panel.j[row]), repr(float(panel.y[row]))]
            if k:
                rec += [repr(float(v)) for v in panel.x[row]]
            writer.writerow(rec)


@dataclass(frozen=True)
class BipartiteGraph:
    """Sparse incidence structure of a matched panel.

    i_idx/j_idx are 0-based per-observation unit indices in panel row
    order; adj is the r x c cross block B1'B2 whose entries are the match
    multiplicities m_ij; d_a/d_b are the degree vectors.
    """

    n: int
    r: int
    c: int
    i_idx: np.ndarray
    j_idx: np.ndarray
    d_a: np.ndarray
    d_b: np.ndarray
    adj: sp.csr_matrix = field(repr=False)

    @cached_property
    def _inv_sqrt_d(self):
        return 1.0 / np.sqrt(self.d_a.astype(np.float64)), 1.0 / np.sqrt(self.d_b.astype(np.float64))

    @cached_property
    def adj_T(self) -> sp.csr_matrix:
        return self.adj.T.tocsr()

    @cached_property
    def components(self) -> tuple[int, np.ndarray]:
        """(count, labels) of connected components over the r+c nodes."""
        n_comp, labels = csgraph.connected_components(_bipartite_csgraph(self), directed=False)
        labels.setflags(write=False)
        return n_comp, labels

    @property
    def num_components(self) -> int:
        return self.components[0]

    def incidence_apply(self, theta: np.ndarray) -> np.ndarray:
        """B theta: per-observation alpha_i + beta_j."""
        return theta[self.i_idx] + theta[self.r + self.j_idx]

    def incidence_T_apply(self, u: np.ndarray) -> np.ndarray:
        """B'u for an observation-length vector u."""
        out = np.zeros(self.r + self.c)
        np.add.at(out[: self.r], self.i_idx, u)
        np.add.at(out[self.r :], self.j_idx, u)
        return out


def build_graph(panel: MatchedPanel) -> BipartiteGraph:
    """Materialize the bipartite graph of a panel.

    Observation rows keep the panel's row order, so any observation-length
    vector aligned with the panel (outcomes, covariate columns) is aligned
    with the graph."""
    i_idx = panel.i - 1
    j_idx = panel.j - 1
    r, c, n = panel.r, panel.c, panel.n
    d_a = np.bincount(i_idx, minlength=r)
    d_b = np.bincount(j_idx, minlength=c)
    if np.any(d_a == 0):
        missing = np.flatnonzero(d_a == 0)[:5] + 1
        raise GraphError(
            f"row units with zero degree: {missing.tolist()} (drop isolated units first)"
        )
    if np.any(d_b == 0):
        missing = np.flatnonzero(d_b == 0)[:5] + 1
        raise GraphError(
            f"column units with zero degree: {missing.tolist()} (drop isolated units first)"
        )
    adj = sp.coo_matrix(
        (np.ones(n), (i_idx, j_idx)), shape=(r, c)
    ).tocsr()  # duplicate (i, j) entries sum into multiplicities
    for arr in (i_idx, j_idx, d_a, d_b):
        arr.setflags(write=False)
    return BipartiteGraph(n=n, r=r, c=c, i_idx=i_idx, j_idx=j_idx, d_a=d_a, d_b=d_b, adj=adj)


def _split(v, r):
    return v[:r], v[r:]


def laplacian_apply(graph: BipartiteGraph, v: np.ndarray) -> np.ndarray:
    """L v with L = B'B, for v of shape (r+c,) or (r+c, m)."""
    if v.shape[0] != graph.r + graph.c:
        raise ValueError(f"expected leading dimension {graph.r + graph.c}, got {v.shape[0]}")
    va, vb = _split(v, graph.r)
    da = graph.d_a if v.ndim == 1 else graph.d_a[:, None]
    db = graph.d_b if v.ndim == 1 else graph.d_b[:, None]
    return np.concatenate([da * va + graph.adj @ vb, graph.adj_T @ va + db * vb])


def normalized_adjacency_apply(graph: BipartiteGraph, v: np.ndarray) -> np.ndarray:
    """Normalized adjacency D^{-1/2} A D^{-1/2} applied to v.

    Only the off-diagonal blocks are nonzero; the (1,2) block is
    (B1'B1)^{-1/2} B1'B2 (B2'B2)^{-1/2}. Its spectral radius is at most 1.
    """
    if v.shape[0] != graph.r + graph.c:
        raise ValueError(f"expected leading dimension {graph.r + graph.c}, got {v.shape[0]}")
    sa, sb = graph._inv_sqrt_d
    va, vb = _split(v, graph.r)
    if v.ndim > 1:
        sa, sb = sa[:, None], sb[:, None]
    return np.concatenate([sa * (graph.adj @ (sb * vb)), sb * (graph.adj_T @ (sa * va))])


def _bipartite_csgraph(graph: BipartiteGraph) -> sp.csr_matrix:
    return sp.bmat([[None, graph.adj], [graph.adj_T, None]], format="csr")


def connected_components(graph: BipartiteGraph):
    """Component labels over the r+c nodes (row units first)."""
    return graph.components


def _component_order(labels, n_comp):
    """Component ids ordered by size descending, ties by smallest node index."""
    sizes = np.bincount(labels, minlength=n_comp)
    first = np.full(n_comp, len(labels))
    for node, lab in enumerate(labels):
        if node < first[lab]:
            first[lab] = node
    return sorted(range(n_comp), key=lambda k: (-sizes[k], first[k]))


@dataclass(frozen=True)
class ComponentMap:
    """Dense re-indexing of the extracted component: new id -> original id."""

    row_ids: np.ndarray  # length r_new, original 1-based i ids
    col_ids: np.ndarray  # length c_new, original 1-based j ids


def extract_largest_component(panel: MatchedPanel) -> tuple[MatchedPanel, ComponentMap]:
    """Restrict a panel to its largest connected component.

    Units are re-indexed densely (preserving original id order) and the
    mapping back to original ids is returned. Applying this twice is a
    no-op on the second pass.
    """
    graph = build_graph(panel)
    n_comp, labels = connected_components(graph)
    keep_comp = _component_order(labels, n_comp)[0]
    keep_row = np.flatnonzero(labels[: graph.r] == keep_comp) + 1
    keep_col = np.flatnonzero(labels[graph.r :] == keep_comp) + 1
    # an observation's two endpoints always share a component, so filtering
    # on the row unit alone keeps exactly the component's observations
    mask = np.isin(panel.i, keep_row)
    new_i = np.searchsorted(keep_row, panel.i[mask]) + 1
    new_j = np.searchsorted(keep_col, panel.j[mask]) + 1
    sub = MatchedPanel(
        i=new_i,
        t=panel.t[mask],
        j=new_j,
        y=panel.y[mask],
        x=None if panel.x is None else panel.x[mask],
        r=len(keep_row),
        c=len(keep_col),
        T=panel.T,
    )
    return sub, ComponentMap(row_ids=keep_row, col_ids=keep_col)


def drop_isolated_units(panel: MatchedPanel) -> tuple[MatchedPanel, ComponentMap]:
    """Re-index a panel densely so every unit in 1..r / 1..c has a match."""
    row_ids = np.unique(panel.i)
    col_ids = np.unique(panel.j)
    sub = MatchedPanel(
        i=np.searchsorted(row_ids, panel.i) + 1,
        t=panel.t,
        j=np.searchsorted(col_ids, panel.j) + 1,
        y=panel.y,
        x=panel.x,
        r=len(row_ids),
        c=len(col_ids),
        T=panel.T,
    )
    return sub, ComponentMap(row_ids=row_ids, col_ids=col_ids)


def projected_laplacian(graph: BipartiteGraph) -> sp.csr_matrix:
    """One-mode projected Laplacian L_{2,perp} = B2'[I - B1(B1'B1)^{-1}B1']B2.

    Sparse symmetric PSD c x c matrix with zero row sums; B1'B1 is diagonal
    so this is D_b - M' D_a^{-1} M with M = B1'B2.
    """
    inv_da = sp.diags(1.0 / graph.d_a.astype(np.float64))
    proj = graph.adj_T @ inv_da @ graph.adj
    out = sp.diags(graph.d_b.astype(np.float64)) - proj
    return ((out + out.T) * 0.5).tocsr()


def smallest_nonzero_eigs(
    mat: sp.spmatrix,
    null_basis: np.ndarray | None,
    k: int = 1,
    tol: float = 1e-8,
    maxiter: int = 5000,
    seed: int = 0,
    dense_threshold: int = 500,
):
    """k smallest nonzero eigenvalues of a symmetric PSD sparse matrix.

    null_basis columns must span the known kernel (e.g. (1_r', -1_c')' for a
    connected bipartite Laplacian). Below dense_threshold the matrix is
    densified and solved exactly; above it a LOBPCG iteration with explicit
    deflation of the null basis is used, preconditioned by pyamg when
    available and by the diagonal otherwise. Residuals are measured relative
    to ||mat||_1; non-convergence raises EigenSolverError with the best
    residual reached.
    """
    mat = sp.csr_matrix(mat)
    dim = mat.shape[0]
    scale = max(abs(mat).sum(axis=1).max(), np.finfo(float).tiny)
    if dim <= dense_threshold:
        vals = np.linalg.eigvalsh(mat.toarray())
        pos = vals[vals > 100 * dim * np.finfo(float).eps * max(scale, 1.0)]
        return pos[:k].copy()

    rng = np.random.default_rng(seed)
    # oversample the block: LOBPCG stalls on clustered small eigenvalues when
    # the block has no slack beyond the requested count
    block = min(dim - 1, k + 4)
    X = rng.standard_normal((dim, block))
    Y = None
    if null_basis is not None:
        Y = np.atleast_2d(np.asarray(null_basis, dtype=np.float64))
        if Y.shape[0] != dim:
            Y = Y.T
        Y = Y / np.linalg.norm(Y, axis=0)
    M = None
    try:
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(mat.tocsr())
        M = ml.aspreconditioner()
    except Exception:
        diag = mat.diagonal()
        if np.all(diag > 0):
            inv = 1.0 / diag
            M = sp.linalg.LinearOperator((dim, dim), matvec=lambda v: inv * v)
    vals, vecs = sp.linalg.lobpcg(
        mat, X, Y=Y, M=M, largest=False, tol=tol * scale, maxiter=maxiter
    )
    order = np.argsort(vals)[:k]
    vals, vecs = vals[order], vecs[:, order]
    resid = np.linalg.norm(mat @ vecs - vecs * vals, axis=0) / np.maximum(
        np.linalg.norm(vecs, axis=0), np.finfo(float).tiny
    )
    worst = float(resid.max() / scale)
    if worst > 10 * tol:
        raise EigenSolverError(
            f"eigensolver did not converge: relative residual {worst:.2e} > {tol:.0e}",
            best_residual=worst,
        )
    return vals[:k].copy()


@dataclass
class ConnectivityReport:
    """Connectivity diagnostics of a matched panel's graph."""

    num_components: int
    component_sizes: list
    rho_full: list
    rho_proj: list
    rho_norm_proj: list
    mover_summary: dict
    note: str = ""

    def to_json(self, **extra) -> str:
        payload = {
            "num_components": self.num_components,
            "component_sizes": self.component_sizes,
            "rho_full": self.rho_full,
            "rho_proj": self.rho_proj,
            "rho_norm_proj": self.rho_norm_proj,
            "mover_summary": self.mover_summary,
        }
        if self.note:
            payload["note"] = self.note
        payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True)


def connectivity_report(
    graph: BipartiteGraph, k: int = 3, tol: float = 1e-8, seed: int = 0
) -> ConnectivityReport:
    """Assemble the ConnectivityReport; eigenvalues are skipped when the
    graph is disconnected (extract the largest component first)."""
    n_comp, labels = connected_components(graph)
    sizes = np.bincount(labels, minlength=n_comp)
    order = _component_order(labels, n_comp)
    partners = graph.adj.copy()
    partners.data[:] = 1.0
    movers = int((np.asarray(partners.sum(axis=1)).ravel() >= 2).sum())
    off = sp.triu(partners.T @ partners, k=1).tocoo()
    mover_summary = {
        "row_units_with_multiple_partners": movers,
        "linked_column_pairs": int(off.nnz),
        "median_shared_row_units_per_linked_pair": float(np.median(off.data)) if off.nnz else 0.0,
    }
    if n_comp > 1:
        return ConnectivityReport(
            num_components=n_comp,
            component_sizes=[int(sizes[c]) for c in order],
            rho_full=[],
            rho_proj=[],
            rho_norm_proj=[],
            mover_summary=mover_summary,
            note="graph disconnected; eigenvalue section skipped",
        )
    lap = sp.bmat(
        [[sp.diags(graph.d_a.astype(float)), graph.adj], [graph.adj_T, sp.diags(graph.d_b.astype(float))]],
        format="csr",
    )
    q = np.concatenate([np.ones(graph.r), -np.ones(graph.c)])
    rho_full = smallest_nonzero_eigs(lap, q, k=k, tol=tol, seed=seed)
    proj = projected_laplacian(graph)
    ones_c = np.ones(graph.c)
    rho_proj = smallest_nonzero_eigs(proj, ones_c, k=k, tol=tol, seed=seed)
    dd = proj.diagonal()
    if np.any(dd <= 0):
        raise GraphError("projected graph has an isolated column unit")
    inv_sqrt = sp.diags(1.0 / np.sqrt(dd))
    norm_proj = inv_sqrt @ proj @ inv_sqrt
    rho_norm = smallest_nonzero_eigs(norm_proj.tocsr(), np.sqrt(dd), k=k, tol=tol, seed=seed)
    return ConnectivityReport(
        num_components=1,
        component_sizes=[graph.r + graph.c],
        rho_full=[float(v) for v in rho_full],
        rho_proj=[float(v) for v in rho_proj],
        rho_norm_proj=[float(v) for v in rho_norm],
        mover_summary=mover_summary,
    )
