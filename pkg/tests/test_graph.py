"""Panel validation, graph construction, and connectivity diagnostics."""

import numpy as np
import pytest

from twoway_eb import (
    GraphError,
    MatchedPanel,
    PanelError,
    build_graph,
    connectivity_report,
    drop_isolated_units,
    extract_largest_component,
    laplacian_apply,
    normalized_adjacency_apply,
    projected_laplacian,
    read_panel_csv,
    smallest_nonzero_eigs,
    write_panel_csv,
)

import reference


def _panel(i, t, j, y=None, **kw):
    i = np.asarray(i)
    y = np.zeros(len(i)) if y is None else np.asarray(y, dtype=float)
    return MatchedPanel(i=i, t=np.asarray(t), j=np.asarray(j), y=y, **kw)


class TestPanelValidation:
    def test_duplicate_observation_rejected(self):
        with pytest.raises(PanelError, match="duplicate"):
            _panel([1, 1, 2], [1, 1, 1], [1, 2, 1])

    def test_out_of_range_ids_rejected(self):
        with pytest.raises(PanelError, match="row-unit id"):
            _panel([0, 1], [1, 1], [1, 1])
        with pytest.raises(PanelError, match="column-unit id"):
            _panel([1, 2], [1, 1], [1, 3], r=2, c=2)

    def test_nonfinite_outcome_rejected(self):
        with pytest.raises(PanelError, match="non-finite"):
            _panel([1, 2], [1, 1], [1, 1], y=[0.0, np.nan])

    def test_ragged_lengths_rejected(self):
        with pytest.raises(PanelError, match="equal length"):
            MatchedPanel(
                i=np.array([1, 2]), t=np.array([1]), j=np.array([1, 1]), y=np.zeros(2)
            )

    def test_counts_default_to_maxima(self):
        p = _panel([1, 3, 2], [1, 1, 2], [2, 1, 2])
        assert (p.r, p.c, p.T) == (3, 2, 2)
        assert p.n == 3


def test_csv_round_trip(tmp_path, small_instance):
    panel, _, _, y = small_instance
    panel = MatchedPanel(i=panel.i, t=panel.t, j=panel.j, y=y, r=panel.r, c=panel.c)
    path = tmp_path / "panel.csv"
    write_panel_csv(panel, path)
    back = read_panel_csv(path)
    np.testing.assert_array_equal(back.i, panel.i)
    np.testing.assert_array_equal(back.t, panel.t)
    np.testing.assert_array_equal(back.j, panel.j)
    np.testing.assert_array_equal(back.y, panel.y)  # repr round-trips exactly
    assert back.x is None


def test_csv_covariates_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 2))
    panel = _panel([1, 2, 3], [1, 1, 1], [1, 2, 1], y=[1.0, 2.0, 3.0], x=x)
    path = tmp_path / "panel.csv"
    write_panel_csv(panel, path)
    back = read_panel_csv(path)
    np.testing.assert_array_equal(back.x, x)


def test_csv_bad_header_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c,d\n1,1,1,0.0\n")
    with pytest.raises(PanelError, match="header"):
        read_panel_csv(path)


def test_build_graph_matches_dense_structure(small_instance):
    panel, graph, _, _ = small_instance
    B = reference.incidence_dense(graph)
    np.testing.assert_array_equal(B.sum(axis=0)[: graph.r], graph.d_a)
    np.testing.assert_array_equal(B.sum(axis=0)[graph.r :], graph.d_b)
    cross = B[:, : graph.r].T @ B[:, graph.r :]
    np.testing.assert_array_equal(graph.adj.toarray(), cross)
    # observation rows keep panel order
    np.testing.assert_array_equal(graph.i_idx, panel.i - 1)
    np.testing.assert_array_equal(graph.j_idx, panel.j - 1)


def test_zero_degree_unit_rejected():
    panel = _panel([1, 2], [1, 1], [1, 1], r=3)
    with pytest.raises(GraphError, match="zero degree"):
        build_graph(panel)


def test_incidence_apply_matches_dense(small_instance, rng):
    _, graph, _, _ = small_instance
    B = reference.incidence_dense(graph)
    theta = rng.standard_normal(graph.r + graph.c)
    u = rng.standard_normal(graph.n)
    np.testing.assert_allclose(graph.incidence_apply(theta), B @ theta, rtol=1e-14)
    np.testing.assert_allclose(graph.incidence_T_apply(u), B.T @ u, rtol=1e-13, atol=1e-13)


def test_laplacian_apply_matches_dense(small_instance, rng):
    _, graph, _, _ = small_instance
    L = reference.laplacian_dense(graph)
    v = rng.standard_normal(graph.r + graph.c)
    np.testing.assert_allclose(laplacian_apply(graph, v), L @ v, atol=1e-12)
    V = rng.standard_normal((graph.r + graph.c, 4))
    np.testing.assert_allclose(laplacian_apply(graph, V), L @ V, atol=1e-12)


def test_laplacian_null_direction(small_instance):
    _, graph, _, _ = small_instance
    q = np.concatenate([np.ones(graph.r), -np.ones(graph.c)])
    np.testing.assert_allclose(laplacian_apply(graph, q), 0.0, atol=1e-12)


def test_normalized_adjacency_matches_dense(small_instance, rng):
    _, graph, _, _ = small_instance
    N = reference.adjacency_normalized_dense(graph)
    v = rng.standard_normal(graph.r + graph.c)
    np.testing.assert_allclose(normalized_adjacency_apply(graph, v), N @ v, atol=1e-12)


def test_normalized_adjacency_spectral_radius_at_most_one():
    rng = np.random.default_rng(11)
    for _ in range(5):
        _, graph = reference.random_connected_panel(rng, r=9, c=4)
        N = reference.adjacency_normalized_dense(graph)
        vals = np.linalg.eigvalsh(N)
        assert vals.max() <= 1.0 + 1e-10
        assert vals.min() >= -1.0 - 1e-10
        # sqrt-degree vector attains the radius on a connected graph
        s = np.concatenate([np.sqrt(graph.d_a), np.sqrt(graph.d_b)])
        np.testing.assert_allclose(N @ s, s, atol=1e-10)


def test_projected_laplacian_matches_dense(small_instance):
    _, graph, _, _ = small_instance
    got = projected_laplacian(graph).toarray()
    np.testing.assert_allclose(got, reference.projected_laplacian_dense(graph), atol=1e-12)
    np.testing.assert_allclose(got.sum(axis=1), 0.0, atol=1e-12)


def _two_block_panel():
    """Two disjoint blocks: rows 1-3 with columns 1-2, rows 4-5 with column 3."""
    i = [1, 2, 3, 1, 4, 5]
    t = [1, 1, 1, 2, 1, 1]
    j = [1, 1, 2, 2, 3, 3]
    return _panel(i, t, j, y=np.arange(6, dtype=float))


def test_component_extraction():
    panel = _two_block_panel()
    graph = build_graph(panel)
    assert graph.num_components == 2
    sub, cmap = extract_largest_component(panel)
    assert sub.r == 3 and sub.c == 2 and sub.n == 4
    np.testing.assert_array_equal(cmap.row_ids, [1, 2, 3])
    np.testing.assert_array_equal(cmap.col_ids, [1, 2])
    assert build_graph(sub).num_components == 1
    # outcomes follow their observations
    np.testing.assert_array_equal(sub.y, [0.0, 1.0, 2.0, 3.0])
    # idempotent on the second pass
    sub2, cmap2 = extract_largest_component(sub)
    assert sub2.n == sub.n
    np.testing.assert_array_equal(cmap2.row_ids, [1, 2, 3])


def test_drop_isolated_units():
    panel = _panel([2, 5], [1, 1], [1, 4], y=[1.0, 2.0], r=6, c=4)
    sub, cmap = drop_isolated_units(panel)
    assert sub.r == 2 and sub.c == 2
    np.testing.assert_array_equal(cmap.row_ids, [2, 5])
    np.testing.assert_array_equal(cmap.col_ids, [1, 4])
    np.testing.assert_array_equal(sub.i, [1, 2])
    np.testing.assert_array_equal(sub.j, [1, 2])
    build_graph(sub)  # no zero-degree units remain


def test_smallest_nonzero_eigs_dense_path(small_instance):
    _, graph, _, _ = small_instance
    L = reference.laplacian_dense(graph)
    lap = projected_laplacian(graph)
    vals = np.linalg.eigvalsh(reference.projected_laplacian_dense(graph))
    want = vals[vals > 1e-10][:2]
    got = smallest_nonzero_eigs(lap, np.ones(graph.c), k=2)
    np.testing.assert_allclose(got, want, rtol=1e-8)
    # full Laplacian needs the signed null direction
    q = np.concatenate([np.ones(graph.r), -np.ones(graph.c)])
    full_vals = np.linalg.eigvalsh(L)
    got_full = smallest_nonzero_eigs(
        _as_csr_laplacian(graph), q, k=1
    )
    np.testing.assert_allclose(got_full, full_vals[full_vals > 1e-10][:1], rtol=1e-8)


def _as_csr_laplacian(graph):
    import scipy.sparse as sp

    return sp.bmat(
        [
            [sp.diags(graph.d_a.astype(float)), graph.adj],
            [graph.adj_T, sp.diags(graph.d_b.astype(float))],
        ],
        format="csr",
    )


def test_smallest_nonzero_eigs_iterative_path_matches_dense():
    rng = np.random.default_rng(5)
    _, graph = reference.random_connected_panel(rng, r=450, c=80, extra=1.0)
    lap = projected_laplacian(graph)
    dense_vals = np.linalg.eigvalsh(lap.toarray())
    want = dense_vals[dense_vals > 1e-8][:2]
    got = smallest_nonzero_eigs(lap, np.ones(graph.c), k=2, dense_threshold=10)
    np.testing.assert_allclose(got, want, rtol=1e-5)


def test_connectivity_report_fields(small_instance):
    _, graph, _, _ = small_instance
    rep = connectivity_report(graph, k=2)
    assert rep.num_components == 1
    assert rep.component_sizes == [graph.r + graph.c]
    assert len(rep.rho_full) == 2 and rep.rho_full[0] > 0
    assert rep.rho_full == sorted(rep.rho_full)
    assert len(rep.rho_proj) == 2 and len(rep.rho_norm_proj) == 2
    assert rep.mover_summary["row_units_with_multiple_partners"] >= 1
    payload = rep.to_json(seed=3)
    assert '"seed": 3' in payload


def test_connectivity_report_disconnected():
    rep = connectivity_report(build_graph(_two_block_panel()))
    assert rep.num_components == 2
    assert rep.component_sizes == [5, 3]
    assert rep.rho_full == [] and "skipped" in rep.note
