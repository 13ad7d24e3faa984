"""Dense reference implementations used to cross-check the matrix-free code.

Everything here materializes the full incidence matrix and runs plain dense
algebra (pinv, inv, slogdet) on small instances. Deliberately simple and
slow: these are the oracles the production paths are tested against, so
they must not share code with them.
"""

import numpy as np

from twoway_eb import MatchedPanel, build_graph


def incidence_dense(graph):
    """n x (r+c) design matrix with a 1 for the row unit and a 1 for the
    column unit of each observation."""
    B = np.zeros((graph.n, graph.r + graph.c))
    B[np.arange(graph.n), graph.i_idx] = 1.0
    B[np.arange(graph.n), graph.r + graph.j_idx] = 1.0
    return B


def laplacian_dense(graph):
    B = incidence_dense(graph)
    return B.T @ B


def null_direction(r, c):
    q = np.concatenate([np.ones(r), -np.ones(c)])
    return q / np.linalg.norm(q)


def normalizer_dense(r, c):
    """R = I + q w' with q = (1_r', -1_c')' and w = (0_r', 1_c'/c)'.

    Maps any solution of the normal equations to the representative with
    mean-zero column effects, absorbing the level into the row effects.
    """
    q = np.concatenate([np.ones(r), -np.ones(c)])
    w = np.concatenate([np.zeros(r), np.ones(c) / c])
    return np.eye(r + c) + np.outer(q, w)


def adjacency_normalized_dense(graph):
    """Degree-normalized bipartite adjacency with zero diagonal blocks."""
    N = np.zeros((graph.r + graph.c, graph.r + graph.c))
    A = graph.adj.toarray().astype(float)
    block = (A / np.sqrt(graph.d_a)[:, None]) / np.sqrt(graph.d_b)[None, :]
    N[: graph.r, graph.r :] = block
    N[graph.r :, : graph.r] = block.T
    return N


def prior_precision_dense(graph, lam_a, lam_b, phi):
    """Lam* = Lam^{1/2} (I - phi N) Lam^{1/2}."""
    s = np.concatenate(
        [np.full(graph.r, np.sqrt(lam_a)), np.full(graph.c, np.sqrt(lam_b))]
    )
    N = adjacency_normalized_dense(graph)
    return s[:, None] * (np.eye(len(s)) - phi * N) * s[None, :]


def location_vector(r, c, mu):
    return np.concatenate([np.full(r, float(mu)), np.zeros(c)])


def theta_ls_dense(graph, y):
    """Normalized least-squares effects via the dense pseudoinverse."""
    B = incidence_dense(graph)
    x0 = np.linalg.pinv(B.T @ B) @ (B.T @ y)
    return normalizer_dense(graph.r, graph.c) @ x0


def posterior_dense(graph, y, lam_a, lam_b, phi, mu):
    """Posterior mean R{v + (L + Lam*)^{-1} B'(y - Bv)} by dense solve."""
    r, c = graph.r, graph.c
    B = incidence_dense(graph)
    L = B.T @ B
    lam = prior_precision_dense(graph, lam_a, lam_b, phi)
    v = location_vector(r, c, mu)
    x = np.linalg.solve(L + lam, B.T @ y - L @ v)
    return normalizer_dense(r, c) @ (v + x)


def posterior_dense_shrunk_form(graph, y, lam_a, lam_b, phi, mu):
    """Same estimator through the other algebraic route:
    theta_ls - R (L + Lam*)^{-1} Lam* (x0 - v)."""
    r, c = graph.r, graph.c
    B = incidence_dense(graph)
    L = B.T @ B
    lam = prior_precision_dense(graph, lam_a, lam_b, phi)
    v = location_vector(r, c, mu)
    x0 = np.linalg.pinv(L) @ (B.T @ y)
    R = normalizer_dense(r, c)
    return R @ x0 - R @ np.linalg.solve(L + lam, lam @ (x0 - v))


def ure_dense(graph, y, sigma2, lam_a, lam_b, phi, mu, weight_diag):
    """Computational-form risk criterion and its constant-adjusted version.

    Returns (value, value_unbiased, constant) where
      value   = 2 sigma^2 tr[W R (L+Lam*)^{-1} R'] + (th - th_ls)' W (th - th_ls)
      constant = sigma^2 tr[W R pinv(L) R']
    """
    r, c = graph.r, graph.c
    L = laplacian_dense(graph)
    lam = prior_precision_dense(graph, lam_a, lam_b, phi)
    R = normalizer_dense(r, c)
    W = np.diag(weight_diag)
    trace_term = 2.0 * sigma2 * np.trace(W @ R @ np.linalg.solve(L + lam, R.T))
    th = posterior_dense(graph, y, lam_a, lam_b, phi, mu)
    th_ls = theta_ls_dense(graph, y)
    d = th - th_ls
    quad = float(d @ W @ d)
    constant = sigma2 * np.trace(W @ R @ np.linalg.pinv(L) @ R.T)
    value = trace_term + quad
    return value, value - constant, constant


def mle_dense(graph, y, sigma2, lam_a, lam_b, phi, mu):
    """Marginal negative log-likelihood criterion (lambda-free terms dropped):
    sigma^2 [logdet(L+Lam*) - logdet(Lam*)] + x' P x with x = x0 - v and
    P = Lam* - Lam* (L+Lam*)^{-1} Lam*."""
    L = laplacian_dense(graph)
    lam = prior_precision_dense(graph, lam_a, lam_b, phi)
    B = incidence_dense(graph)
    x0 = np.linalg.pinv(L) @ (B.T @ y)
    x = x0 - location_vector(graph.r, graph.c, mu)
    G = L + lam
    P = lam - lam @ np.linalg.solve(G, lam)
    _, ld_g = np.linalg.slogdet(G)
    _, ld_lam = np.linalg.slogdet(lam)
    return sigma2 * (ld_g - ld_lam) + float(x @ P @ x)


def projected_laplacian_dense(graph):
    """Column-block Schur complement D_b - A' D_a^{-1} A."""
    A = graph.adj.toarray().astype(float)
    return np.diag(graph.d_b.astype(float)) - A.T @ (A / graph.d_a[:, None])


def ls_risk_dense(graph, sigma2, weight_diag):
    L = laplacian_dense(graph)
    R = normalizer_dense(graph.r, graph.c)
    W = np.diag(weight_diag)
    return sigma2 * np.trace(W @ R @ np.linalg.pinv(L) @ R.T)


def random_connected_panel(rng, r, c, extra=1.5, max_tries=80):
    """Draw a random matched panel whose bipartite graph is connected.

    Every column unit is seeded with one random row unit, then each row
    unit receives 1 + Poisson(extra) matches; period indices count the
    matches per row unit so (i, t) keys stay unique. Redraws until the
    graph is connected.
    """
    for _ in range(max_tries):
        pairs = [(int(rng.integers(1, r + 1)), j) for j in range(1, c + 1)]
        for i in range(1, r + 1):
            k = 1 + int(rng.poisson(extra))
            pairs.extend((i, int(j)) for j in rng.integers(1, c + 1, size=k))
        counts = {}
        i_arr, t_arr, j_arr = [], [], []
        for i, j in pairs:
            counts[i] = counts.get(i, 0) + 1
            i_arr.append(i)
            t_arr.append(counts[i])
            j_arr.append(j)
        y = rng.standard_normal(len(i_arr))
        panel = MatchedPanel(
            i=np.array(i_arr), t=np.array(t_arr), j=np.array(j_arr), y=y, r=r, c=c
        )
        graph = build_graph(panel)
        if graph.num_components == 1:
            return panel, graph
    raise RuntimeError(f"no connected panel in {max_tries} tries (r={r}, c={c})")


def model_outcomes(rng, graph, theta, sigma2):
    """y = B theta + noise for a given stacked effect vector."""
    theta = np.asarray(theta, dtype=np.float64)
    mean = theta[graph.i_idx] + theta[graph.r + graph.j_idx]
    return mean + np.sqrt(sigma2) * rng.standard_normal(graph.n)
