"""Road graph from a pixel mask, plus the normalised operators the GNN kernels use."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataio import read_tensor_file, write_tensor_file
from .errors import ShapeError
from .tensor_core import SparseMatrix

_NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


@dataclass
class RoadGraph:
    nodes: np.ndarray  # (N, 2) row, col in row-major order
    adjacency: SparseMatrix
    grid_shape: tuple[int, int]
    node_index: np.ndarray = field(init=False, repr=False)  # (H, W) -> node id or -1

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1, 2)
        H, W = self.grid_shape
        self.node_index = np.full((H, W), -1, dtype=np.int64)
        self.node_index[self.nodes[:, 0], self.nodes[:, 1]] = np.arange(self.n_nodes)

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.row_ptr)


def extract_graph(mask: np.ndarray) -> RoadGraph:
    """One node per true pixel (row-major), 8-neighbourhood edges between nodes."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    nodes = np.argwhere(mask)
    index = np.full((H, W), -1, dtype=np.int64)
    index[nodes[:, 0], nodes[:, 1]] = np.arange(len(nodes))
    src, dst = [], []
    for dr, dc in _NEIGHBOURS:
        r = nodes[:, 0] + dr
        c = nodes[:, 1] + dc
        ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        j = np.full(len(nodes), -1)
        j[ok] = index[r[ok], c[ok]]
        keep = j >= 0
        src.append(np.nonzero(keep)[0])
        dst.append(j[keep])
    n = len(nodes)
    src = np.concatenate(src) if src else np.zeros(0, np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
    adj = sp.csr_matrix((np.ones(src.size), (src, dst)), shape=(n, n))
    return RoadGraph(nodes, SparseMatrix.from_scipy(adj), (H, W))


def graph_from_adjacency(a: np.ndarray) -> RoadGraph:
    """Wrap an arbitrary symmetric 0/1 adjacency; nodes are laid out on one grid row."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not np.array_equal(a, a.T) or np.any(np.diag(a)):
        raise ShapeError("adjacency must be square, symmetric and loop-free")
    nodes = np.stack([np.zeros(n, np.int64), np.arange(n)], axis=1)
    return RoadGraph(nodes, SparseMatrix.from_dense(a), (1, max(n, 1)))


def _scale_entries(adj: SparseMatrix, left: np.ndarray, right: np.ndarray) -> SparseMatrix:
    rows = np.repeat(np.arange(adj.n_rows), np.diff(adj.row_ptr))
    vals = left[rows] * adj.values * right[adj.col_idx]
    return SparseMatrix(adj.n_rows, adj.n_cols, adj.row_ptr, adj.col_idx, vals)


def normalized_adjacency(g: RoadGraph) -> SparseMatrix:
    """D^-1/2 (A + I) D^-1/2 with D the degree of A + I."""
    n = g.n_nodes
    a_hat = g.adjacency.to_scipy() + sp.identity(n, format="csr")
    a_hat = SparseMatrix.from_scipy(a_hat)
    d = a_hat.row_sums()
    inv_sqrt = 1.0 / np.sqrt(d)
    return _scale_entries(a_hat, inv_sqrt, inv_sqrt)


def scaled_laplacian(g: RoadGraph) -> SparseMatrix:
    """2 L_sym / lambda_max - I with lambda_max = 2, i.e. L_sym - I.

    Off-diagonals are -D^-1/2 A D^-1/2; the diagonal is 0 for connected nodes
    and -1 for isolated ones (their L_sym diagonal is taken as 0).
    """
    n = g.n_nodes
    deg = g.adjacency.row_sums()
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    off = _scale_entries(g.adjacency, -inv_sqrt, inv_sqrt)
    diag = np.where(deg > 0, 0.0, -1.0)
    m = off.to_scipy() + sp.diags(diag, format="csr")
    m.eliminate_zeros()
    return SparseMatrix.from_scipy(m)


def mean_aggregator(g: RoadGraph) -> SparseMatrix:
    """Row-normalised adjacency D^-1 A; isolated rows stay empty."""
    deg = g.adjacency.row_sums()
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1e-300), 0.0)
    return _scale_entries(g.adjacency, inv, np.ones(g.n_nodes))


@dataclass
class GraphOperators:
    s_hat: SparseMatrix
    l_tilde: SparseMatrix
    mean_adj: SparseMatrix

    @classmethod
    def from_graph(cls, g: RoadGraph) -> "GraphOperators":
        return cls(normalized_adjacency(g), scaled_laplacian(g), mean_aggregator(g))

    @property
    def n_nodes(self) -> int:
        return self.s_hat.n_rows


def grid_to_nodes(grid: np.ndarray, g: RoadGraph) -> np.ndarray:
    """(..., C, H, W) -> (..., N, C) gather at node pixels."""
    if tuple(grid.shape[-2:]) != tuple(g.grid_shape):
        raise ShapeError(f"grid {grid.shape[-2:]} does not match graph {g.grid_shape}")
    picked = grid[..., g.nodes[:, 0], g.nodes[:, 1]]  # (..., C, N)
    return np.swapaxes(picked, -1, -2)


def nodes_to_grid(x: np.ndarray, g: RoadGraph, H: int | None = None, W: int | None = None) -> np.ndarray:
    """(..., N, C) -> (..., C, H, W) scatter; off-road pixels are 0."""
    H = g.grid_shape[0] if H is None else H
    W = g.grid_shape[1] if W is None else W
    if (H, W) != tuple(g.grid_shape):
        raise ShapeError(f"grid {(H, W)} does not match graph {g.grid_shape}")
    if x.shape[-2] != g.n_nodes:
        raise ShapeError(f"{x.shape[-2]} node rows for a {g.n_nodes}-node graph")
    *lead, _, C = x.shape
    out = np.zeros((*lead, C, H, W), dtype=x.dtype)
    out[..., g.nodes[:, 0], g.nodes[:, 1]] = np.swapaxes(x, -1, -2)
    return out


# ---------------------------------------------------------------- files


def save_graph(g: RoadGraph, out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor_file(d / "nodes.gct", g.nodes.astype(np.uint64))
    write_tensor_file(d / "row_ptr.gct", g.adjacency.row_ptr.astype(np.uint64))
    write_tensor_file(d / "col_idx.gct", g.adjacency.col_idx.astype(np.uint64))
    write_tensor_file(d / "grid_shape.gct", np.asarray(g.grid_shape, dtype=np.uint64))


def load_graph(path) -> RoadGraph:
    d = Path(path)
    nodes = read_tensor_file(d / "nodes.gct").astype(np.int64).reshape(-1, 2)
    row_ptr = read_tensor_file(d / "row_ptr.gct").astype(np.int64)
    col_idx = read_tensor_file(d / "col_idx.gct").astype(np.int64)
    H, W = (int(v) for v in read_tensor_file(d / "grid_shape.gct"))
    n = nodes.shape[0]
    adj = SparseMatrix(n, n, row_ptr, col_idx, np.ones(col_idx.size))
    return RoadGraph(nodes, adj, (H, W))
