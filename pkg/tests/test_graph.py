import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcast import oracles
from gridcast.errors import ShapeError
from gridcast.graph import (GraphOperators, extract_graph, graph_from_adjacency, grid_to_nodes, load_graph,
                            mean_aggregator, nodes_to_grid, normalized_adjacency, save_graph, scaled_laplacian)


def test_empty_mask_gives_empty_graph():
    g = extract_graph(np.zeros((4, 4), bool))
    assert g.n_nodes == 0 and g.n_edges == 0


def test_full_3x3_degrees():
    g = extract_graph(np.ones((3, 3), bool))
    deg = g.degrees()
    assert g.n_nodes == 9
    assert [deg[i] for i in (0, 2, 6, 8)] == [3, 3, 3, 3]
    assert deg[4] == 8
    assert g.n_edges == 20


def test_diagonal_neighbours_are_linked():
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = mask[1, 1] = True
    assert extract_graph(mask).n_edges == 1


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_extracted_graph_invariants(seed):
    r = np.random.default_rng(seed)
    mask = r.random((6, 7)) < 0.5
    g = extract_graph(mask)
    a = g.adjacency.to_dense()
    assert np.array_equal(a, a.T) and not np.any(np.diag(a))
    assert np.all(mask[g.nodes[:, 0], g.nodes[:, 1]])
    order = g.nodes[:, 0] * 7 + g.nodes[:, 1]
    assert np.all(np.diff(order) > 0)
    i, j = np.nonzero(a)
    assert np.all(np.max(np.abs(g.nodes[i] - g.nodes[j]), axis=1) == 1)


def test_normalized_adjacency_examples():
    s = normalized_adjacency(graph_from_adjacency(np.zeros((1, 1))))
    np.testing.assert_array_equal(s.to_dense(), [[1.0]])
    s = normalized_adjacency(graph_from_adjacency(np.array([[0, 1], [1, 0]])))
    np.testing.assert_allclose(s.to_dense(), np.full((2, 2), 0.5), atol=1e-15)


def test_scaled_laplacian_examples():
    np.testing.assert_array_equal(scaled_laplacian(graph_from_adjacency(np.zeros((1, 1)))).to_dense(), [[-1.0]])
    # degrees of A (no self-loops) are 1, so L_sym = [[1, -1], [-1, 1]]
    lt = scaled_laplacian(graph_from_adjacency(np.array([[0, 1], [1, 0]]))).to_dense()
    np.testing.assert_allclose(lt, [[0, -1], [-1, 0]], atol=1e-15)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_operators_match_dense_oracles_and_spectra(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 13))
    a = oracles.random_adjacency(r, n)
    g = graph_from_adjacency(a)
    s = normalized_adjacency(g).to_dense()
    lt = scaled_laplacian(g).to_dense()
    assert np.max(np.abs(s - oracles.dense_normalized_adjacency(a))) < 1e-12
    assert np.max(np.abs(lt - oracles.dense_scaled_laplacian(a))) < 1e-12
    assert np.max(np.abs(s - s.T)) < 1e-12 and np.max(np.abs(lt - lt.T)) < 1e-12
    assert np.all(s.sum(axis=1) > 0)
    assert np.max(np.abs(np.linalg.eigvalsh(s))) <= 1 + 1e-9
    ev = np.linalg.eigvalsh(lt)
    assert ev.min() >= -1 - 1e-9 and ev.max() <= 1 + 1e-9


def test_row_sums_are_one_only_on_regular_graphs():
    ring = np.roll(np.eye(6), 1, axis=1) + np.roll(np.eye(6), -1, axis=1)
    np.testing.assert_allclose(normalized_adjacency(graph_from_adjacency(ring)).to_dense().sum(axis=1), 1.0)
    # star: the hub row of the symmetric normalisation exceeds 1, the spectrum does not
    star = np.zeros((5, 5))
    star[0, 1:] = star[1:, 0] = 1
    s = normalized_adjacency(graph_from_adjacency(star)).to_dense()
    assert s.sum(axis=1)[0] > 1
    assert np.max(np.abs(np.linalg.eigvalsh(s))) <= 1 + 1e-12


def test_spectral_radius_on_road_graph():
    mask = np.random.default_rng(5).random((8, 8)) < 0.6
    ops = GraphOperators.from_graph(extract_graph(mask))
    assert ops.n_nodes <= 64
    assert np.max(np.abs(np.linalg.eigvalsh(ops.s_hat.to_dense()))) <= 1 + 1e-9


def test_mean_aggregator_rows():
    a = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], float)
    a = np.pad(a, ((0, 1), (0, 1)))
    m = mean_aggregator(graph_from_adjacency(a)).to_dense()
    np.testing.assert_allclose(m.sum(axis=1), [1, 1, 1, 0])
    np.testing.assert_allclose(m[0], [0, 0.5, 0.5, 0])


def test_graph_from_adjacency_validates():
    with pytest.raises(ShapeError):
        graph_from_adjacency(np.array([[0, 1], [0, 0]]))
    with pytest.raises(ShapeError):
        graph_from_adjacency(np.eye(2))


def test_grid_node_round_trip(rng):
    mask = rng.random((5, 6)) < 0.5
    g = extract_graph(mask)
    x = rng.standard_normal((3, g.n_nodes, 4))
    grid = nodes_to_grid(x, g)
    assert grid.shape == (3, 4, 5, 6)
    assert not grid[..., ~mask].any()
    np.testing.assert_array_equal(grid_to_nodes(grid, g), x)


def test_scatter_single_node_and_empty_graph():
    mask = np.zeros((4, 5), bool)
    mask[2, 3] = True
    g = extract_graph(mask)
    grid = nodes_to_grid(np.array([[7.0]]), g)
    assert grid.shape == (1, 4, 5)
    assert grid[0, 2, 3] == 7.0 and np.count_nonzero(grid) == 1
    empty = extract_graph(np.zeros((4, 5), bool))
    assert not nodes_to_grid(np.zeros((0, 2)), empty).any()


def test_grid_to_nodes_dim_mismatch():
    g = extract_graph(np.ones((3, 3), bool))
    with pytest.raises(ShapeError):
        grid_to_nodes(np.zeros((2, 4, 4)), g)


def test_graph_files_round_trip_and_reproducible(tmp_path):
    mask = np.random.default_rng(2).random((7, 9)) < 0.4
    g = extract_graph(mask)
    save_graph(g, tmp_path / "a")
    save_graph(extract_graph(mask), tmp_path / "b")
    for name in ("nodes.gct", "row_ptr.gct", "col_idx.gct", "grid_shape.gct"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    h = load_graph(tmp_path / "a")
    assert h.grid_shape == g.grid_shape
    np.testing.assert_array_equal(h.nodes, g.nodes)
    np.testing.assert_array_equal(h.adjacency.to_dense(), g.adjacency.to_dense())
