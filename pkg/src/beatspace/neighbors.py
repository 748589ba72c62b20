"""Brute-force distances and k-nearest-neighbor queries.

Everything here is exact (no trees or approximations) and deterministic:
distance ties are broken by point index, and the canonical-order helpers
make the nonlinear reducers bitwise permutation-equivariant.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = [
    "pairwise_sq_dists",
    "knn_brute",
    "neighbor_order",
    "canonical_order",
    "jitter_duplicates",
]


def pairwise_sq_dists(A: np.ndarray, B: np.ndarray | None = None, out: np.ndarray | None = None) -> np.ndarray:
    """Squared Euclidean distances between rows of A and rows of B (or A)."""
    A = np.asarray(A)
    B = A if B is None else np.asarray(B)
    sq_a = np.einsum("ij,ij->i", A, A)
    sq_b = sq_a if B is A else np.einsum("ij,ij->i", B, B)
    if out is None:
        out = np.empty((A.shape[0], B.shape[0]), dtype=A.dtype)
    np.dot(A, B.T, out=out)
    out *= -2.0
    out += sq_a[:, None]
    out += sq_b[None, :]
    np.maximum(out, 0.0, out=out)
    return out


def neighbor_order(X: np.ndarray, chunk: int = 512) -> np.ndarray:
    """(N, N-1) neighbor indices per row, nearest first, self excluded.

    Ordering is by (distance, index), so equidistant neighbors are ranked
    by their row index and the result is fully deterministic.
    """
    X = np.asarray(X)
    n = X.shape[0]
    order = np.empty((n, n - 1), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d2 = pairwise_sq_dists(X[lo:hi], X)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = -1.0  # pin self first
        idx = np.argsort(d2, axis=1, kind="stable")
        order[lo:hi] = idx[:, 1:]
    return order


def knn_brute(X: np.ndarray, k: int, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbors per row: (indices, distances), self excluded."""
    X = np.asarray(X)
    n = X.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k), dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d2 = pairwise_sq_dists(X[lo:hi].astype(np.float64), X.astype(np.float64))
        d2[np.arange(hi - lo), np.arange(lo, hi)] = -1.0
        if k + 1 < n:
            cand = np.argpartition(d2, k, axis=1)[:, : k + 1]
        else:
            cand = np.tile(np.arange(n), (hi - lo, 1))
        cand_d = np.take_along_axis(d2, cand, axis=1)
        sub = np.lexsort((cand, cand_d), axis=1)
        cand = np.take_along_axis(cand, sub, axis=1)
        cand_d = np.take_along_axis(cand_d, sub, axis=1)
        idx[lo:hi] = cand[:, 1 : k + 1]
        dist[lo:hi] = np.sqrt(np.maximum(cand_d[:, 1 : k + 1], 0.0))
    return idx, dist


def canonical_order(X: np.ndarray) -> np.ndarray:
    """Permutation sorting rows lexicographically (column 0 first)."""
    X = np.asarray(X)
    return np.lexsort(X.T[::-1])


def jitter_duplicates(X: np.ndarray, rng: np.random.Generator, scale: float = 1e-9) -> np.ndarray:
    """Perturb rows that duplicate an earlier row; affinity calibration is
    undefined at zero distance.  Returns a jittered copy (or X unchanged)."""
    X = np.asarray(X)
    perm = canonical_order(X)
    Xs = X[perm]
    dup_sorted = np.zeros(X.shape[0], dtype=bool)
    dup_sorted[1:] = np.all(Xs[1:] == Xs[:-1], axis=1)
    if not dup_sorted.any():
        return X
    dup = np.zeros(X.shape[0], dtype=bool)
    dup[perm] = dup_sorted
    warnings.warn(f"jittering {int(dup.sum())} duplicate rows by {scale:g}")
    out = X.astype(np.float64, copy=True)
    out[dup] += scale * rng.standard_normal((int(dup.sum()), X.shape[1]))
    return out
