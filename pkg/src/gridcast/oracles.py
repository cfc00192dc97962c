"""Brute-force reference implementations used to verify the fast paths.

Everything here is dense numpy or explicit Python loops and deliberately shares
no code with the operators it checks.
"""

from __future__ import annotations

import numpy as np


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """'Same' cross-correlation of (C,H,W) with (O,C,k,k), zero padding."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((O, H, W))
    for o in range(O):
        for r in range(H):
            for c in range(W):
                acc = 0.0 if b is None else float(b[o])
                for ci in range(C):
                    for i in range(k):
                        for j in range(k):
                            rr, cc = r + i - p, c + j - p
                            if 0 <= rr < H and 0 <= cc < W:
                                acc += w[o, ci, i, j] * x[ci, rr, cc]
                out[o, r, c] = acc
    return out


def avg_pool2_loops(x: np.ndarray) -> np.ndarray:
    C, H, W = x.shape
    out = np.zeros((C, H // 2, W // 2))
    for ch in range(C):
        for r in range(H // 2):
            for c in range(W // 2):
                out[ch, r, c] = (x[ch, 2 * r, 2 * c] + x[ch, 2 * r + 1, 2 * c]
                                 + x[ch, 2 * r, 2 * c + 1] + x[ch, 2 * r + 1, 2 * c + 1]) / 4.0
    return out


def dense_normalized_adjacency(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    a_hat = a + np.eye(n)
    d = a_hat.sum(axis=1)
    return a_hat / np.sqrt(np.outer(d, d))


def dense_scaled_laplacian(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    d = a.sum(axis=1)
    l_sym = np.zeros((n, n))
    for i in range(n):
        if d[i] > 0:
            l_sym[i, i] = 1.0
        for j in range(n):
            if a[i, j] and d[i] > 0 and d[j] > 0:
                l_sym[i, j] -= a[i, j] / np.sqrt(d[i] * d[j])
    return 2.0 * l_sym / 2.0 - np.eye(n)


def chebyshev_matrices(l_tilde: np.ndarray, k: int) -> list[np.ndarray]:
    n = l_tilde.shape[0]
    mats = [np.eye(n)]
    if k > 1:
        mats.append(l_tilde.copy())
    while len(mats) < k:
        mats.append(2.0 * l_tilde @ mats[-1] - mats[-2])
    return mats


def cheb_dense(x, a, weights, bias):
    l_tilde = dense_scaled_laplacian(a)
    out = bias[None, :].astype(float).copy()
    for t_k, w_k in zip(chebyshev_matrices(l_tilde, len(weights)), weights):
        out = out + t_k @ x @ w_k
    return out


def sage_loops(x, a, w_self, w_neigh, bias):
    n = x.shape[0]
    out = np.zeros((n, w_self.shape[1]))
    for i in range(n):
        neigh = [j for j in range(n) if a[i, j]]
        m = np.mean(x[neigh], axis=0) if neigh else np.zeros(x.shape[1])
        out[i] = x[i] @ w_self + m @ w_neigh + bias
    return out


def sg_dense(x, a, weight, bias, k=5):
    s = dense_normalized_adjacency(a)
    return np.linalg.matrix_power(s, k) @ x @ weight + bias[None, :]


def random_adjacency(rng: np.random.Generator, n: int, p: float | None = None) -> np.ndarray:
    """Symmetric 0/1 matrix, zero diagonal."""
    p = rng.uniform(0.1, 0.6) if p is None else p
    upper = np.triu(rng.random((n, n)) < p, k=1)
    return (upper | upper.T).astype(float)


def central_differences(f, arrays: list[np.ndarray], coords: list[list[tuple]], h: float = 1e-5) -> list[np.ndarray]:
    """d f / d arrays[i][c] for every c in coords[i]; arrays are perturbed in place and restored."""
    out = []
    for arr, cs in zip(arrays, coords):
        g = np.zeros(len(cs))
        for n, c in enumerate(cs):
            orig = arr[c]
            arr[c] = orig + h
            fp = f()
            arr[c] = orig - h
            fm = f()
            arr[c] = orig
            g[n] = (fp - fm) / (2 * h)
        out.append(g)
    return out
