"""UMAP-style embedding: a locally calibrated fuzzy neighbor graph in data
space, laid out in 2-D by stochastic gradient descent on a smooth
attraction/repulsion kernel.

Per point, memberships are w(i->j) = exp(-max(0, d_ij - rho_i) / sigma_i)
over the exact k nearest neighbors, where rho_i is the nearest-neighbor
distance and sigma_i is bisected so the memberships sum to log2(k).  The
directed graph is symmetrized with the probabilistic union a + b - a*b.
The layout kernel 1 / (1 + a * d^(2b)) is least-squares fitted from
(min_dist, spread).

Determinism mirrors the t-SNE module: canonical row ordering plus a
seeded generator make runs bitwise reproducible and permutation
equivariant.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import least_squares

from .embedding import Embedding
from .neighbors import canonical_order, jitter_duplicates, knn_brute
from .pca import pca_fit, pca_transform

__all__ = [
    "UmapParams",
    "SmoothKnn",
    "smooth_knn_calibrate",
    "fuzzy_graph",
    "fit_ab",
    "umap_optimize",
    "umap_embed",
]

log = logging.getLogger(__name__)


@dataclass
class UmapParams:
    n_neighbors: int = 15
    min_dist: float = 0.1
    spread: float = 1.0
    n_epochs: int = 500
    negative_sample_rate: int = 5
    seed: int = 0
    init: str = "pca"  # "pca" | "spectral" | "random"
    a: float | None = None  # derived from (min_dist, spread) when unset
    b: float | None = None

    def __post_init__(self) -> None:
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be at least 2")
        if not 0 < self.min_dist < self.spread:
            raise ValueError("need 0 < min_dist < spread")
        if self.init not in ("pca", "spectral", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.a is None or self.b is None:
            self.a, self.b = fit_ab(self.min_dist, self.spread)


class SmoothKnn(NamedTuple):
    rho: float
    sigma: float
    converged: bool


def _calibrate_block(
    knn_dists: np.ndarray, local_connectivity: int = 1, tol: float = 1e-5, max_iter: int = 64
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (rho, sigma) calibration over (N, k) sorted neighbor distances.

    sigma_i solves sum_j exp(-max(0, d_ij - rho_i) / sigma_i) = log2(k).
    Rows whose membership mass cannot reach the target (for example all
    neighbors at distance rho) come back flagged with the limiting sigma.
    """
    d = np.asarray(knn_dists, dtype=np.float64)
    n, k = d.shape
    if np.any(d[:, 1:] < d[:, :-1]):
        raise ValueError("neighbor distances must be sorted ascending")
    rho = d[:, local_connectivity - 1].copy()
    target = np.log2(k)
    gaps = np.maximum(d - rho[:, None], 0.0)

    sigma = np.ones(n)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    # The mass is monotone increasing in sigma with infimum = #[d <= rho]
    # and supremum k; outside that range bisection can only saturate.
    floor = (gaps == 0.0).sum(axis=1)
    reachable = (floor < target) & (target < k + tol)

    active = reachable.copy()
    m = np.exp(-gaps / sigma[:, None]).sum(axis=1)
    for _ in range(max_iter):
        diff = m - target
        active &= np.abs(diff) > tol
        if not active.any():
            break
        low = active & (diff < 0)
        high = active & (diff > 0)
        lo[low] = sigma[low]
        sigma[low] = np.where(np.isinf(hi[low]), sigma[low] * 2.0, (sigma[low] + hi[low]) / 2.0)
        hi[high] = sigma[high]
        sigma[high] = np.where(lo[high] == 0.0, sigma[high] / 2.0, (sigma[high] + lo[high]) / 2.0)
        m[active] = np.exp(-gaps[active] / sigma[active][:, None]).sum(axis=1)
    converged = np.abs(m - target) <= tol
    sigma[~reachable & (floor >= target)] = np.finfo(np.float64).tiny  # saturated rows
    converged[~reachable] = False
    return rho, sigma, converged


def smooth_knn_calibrate(
    knn_dists: np.ndarray, local_connectivity: int = 1, tol: float = 1e-5, max_iter: int = 64
) -> SmoothKnn:
    """Calibrate one point's (rho, sigma) from its sorted neighbor distances."""
    d = np.asarray(knn_dists, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("need at least 2 sorted neighbor distances")
    rho, sigma, converged = _calibrate_block(d[None, :], local_connectivity, tol, max_iter)
    return SmoothKnn(float(rho[0]), float(sigma[0]), bool(converged[0]))


def fuzzy_graph(X: np.ndarray, params: UmapParams) -> sp.csr_matrix:
    """Symmetric fuzzy neighbor graph over the exact k-nearest neighbors.

    Directed memberships exp(-max(0, d - rho_i) / sigma_i) are combined by
    the probabilistic union w = a + b - a*b, giving weights in (0, 1] and a
    zero diagonal.
    """
    X = np.asarray(X)
    n = X.shape[0]
    k = min(params.n_neighbors, n - 1)
    if k < 1:
        raise ValueError("need at least 2 points")
    idx, dist = knn_brute(X, k)
    rho, sigma, converged = _calibrate_block(dist)
    n_flagged = int((~converged).sum())
    if n_flagged:
        log.warning("smooth-knn calibration flagged %d/%d rows", n_flagged, n)

    with np.errstate(over="ignore", under="ignore"):
        w = np.exp(-np.maximum(dist - rho[:, None], 0.0) / sigma[:, None])
    rows = np.repeat(np.arange(n), k)
    directed = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, n))
    transpose = directed.T.tocsr()
    graph = directed + transpose - directed.multiply(transpose)
    graph = sp.csr_matrix(graph)
    graph.eliminate_zeros()
    return graph


def _kernel_residuals(ab: np.ndarray, x: np.ndarray, target: np.ndarray) -> np.ndarray:
    a, b = ab
    return 1.0 / (1.0 + a * x ** (2.0 * b)) - target


def fit_ab(min_dist: float, spread: float, grid_points: int = 300, max_nfev: int = 200) -> tuple[float, float]:
    """Least-squares fit of 1/(1 + a*x^(2b)) to the piecewise falloff target
    (1 up to min_dist, then exp(-(x - min_dist)/spread))."""
    if not 0 < min_dist < spread:
        raise ValueError("need 0 < min_dist < spread")
    x = np.linspace(0.0, 3.0 * spread, grid_points)
    target = np.where(x <= min_dist, 1.0, np.exp(-(x - min_dist) / spread))
    result = least_squares(
        _kernel_residuals,
        x0=np.array([1.0, 1.0]),
        bounds=([1e-8, 1e-8], [np.inf, np.inf]),
        args=(x, target),
        max_nfev=max_nfev,
    )
    if not result.success:
        rms = float(np.sqrt(np.mean(result.fun**2)))
        raise RuntimeError(f"kernel fit did not converge within {max_nfev} evaluations (rms residual {rms:.4g})")
    return float(result.x[0]), float(result.x[1])


def umap_optimize(
    graph: sp.spmatrix, init_Y: np.ndarray, params: UmapParams, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Lay out the graph by SGD over its edges.

    Edges fire with frequency proportional to weight (an edge of weight w
    is processed every w_max/w epochs); each firing applies an attractive
    move to both endpoints and ``negative_sample_rate`` uniform repulsive
    moves to the head.  Gradient components are clipped to +-4 and the
    learning rate anneals linearly from 1 to 0.  For a fixed seed and edge
    order the result is bitwise reproducible.
    """
    rng = rng or np.random.default_rng(params.seed)
    coo = sp.coo_matrix(graph)
    if coo.nnz == 0:
        raise ValueError("empty graph")
    heads = coo.row.astype(np.int64)
    tails = coo.col.astype(np.int64)
    weights = coo.data.astype(np.float64)
    Y = np.array(init_Y, dtype=np.float64, copy=True)
    n = Y.shape[0]
    a, b = float(params.a), float(params.b)

    epochs_per_sample = weights.max() / weights
    next_due = epochs_per_sample.copy()
    nsr = params.negative_sample_rate

    for epoch in range(1, params.n_epochs + 1):
        alpha = 1.0 - (epoch - 1) / params.n_epochs
        due = next_due <= epoch
        if due.any():
            h = heads[due]
            t = tails[due]
            diff = Y[h] - Y[t]
            d2 = np.einsum("ij,ij->i", diff, diff)
            with np.errstate(divide="ignore", invalid="ignore"):
                coeff = np.where(
                    d2 > 0.0,
                    (-2.0 * a * b * d2 ** (b - 1.0)) / (1.0 + a * d2**b),
                    0.0,
                )
            grad = np.clip(coeff[:, None] * diff, -4.0, 4.0)
            np.add.at(Y, h, alpha * grad)
            np.add.at(Y, t, -alpha * grad)

            negatives = rng.integers(0, n, size=(h.size, nsr))
            h_rep = np.repeat(h, nsr)
            k_flat = negatives.ravel()
            keep = k_flat != h_rep
            h_rep = h_rep[keep]
            k_flat = k_flat[keep]
            diff_n = Y[h_rep] - Y[k_flat]
            d2n = np.einsum("ij,ij->i", diff_n, diff_n)
            coeff_n = (2.0 * b) / ((0.001 + d2n) * (1.0 + a * d2n**b))
            grad_n = np.clip(coeff_n[:, None] * diff_n, -4.0, 4.0)
            np.add.at(Y, h_rep, alpha * grad_n)

            next_due[due] += epochs_per_sample[due]
        if not np.isfinite(Y).all():
            raise RuntimeError(f"non-finite coordinates at epoch {epoch}")
    return Y


def _spectral_init(graph: sp.spmatrix, rng: np.random.Generator) -> np.ndarray:
    """First non-trivial eigenvectors of the normalized graph Laplacian."""
    g = np.asarray(graph.todense(), dtype=np.float64)
    deg = g.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(g.shape[0]) - inv_sqrt[:, None] * g * inv_sqrt[None, :]
    _, vecs = np.linalg.eigh(lap)
    init = vecs[:, 1:3]
    if init.shape[1] < 2:
        init = np.hstack([init, rng.standard_normal((g.shape[0], 2 - init.shape[1]))])
    peak = np.abs(init).max()
    return init * (10.0 / peak) if peak > 0 else init


def umap_embed(X: np.ndarray, params: UmapParams | None = None) -> Embedding:
    """Embed rows of X into 2-D via the fuzzy graph and SGD layout.

    Raises on fully degenerate input (all rows identical); partial
    duplicates are jittered by 1e-9 with a warning.
    """
    params = params or UmapParams()
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    if params.n_neighbors >= n:
        raise ValueError(f"n_neighbors {params.n_neighbors} must be below the point count {n}")
    if np.all(X == X[0]):
        raise ValueError("duplicate point row: all inputs identical")

    perm = canonical_order(X)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(n)
    Xc = X[perm]
    rng = np.random.default_rng(params.seed)
    Xc = jitter_duplicates(Xc, rng)

    graph = fuzzy_graph(Xc, params)

    if params.init == "pca":
        model = pca_fit(Xc, 2)
        scores = pca_transform(model, Xc)
        peak = np.abs(scores).max()
        init = scores * (10.0 / peak) if peak > 0 else rng.standard_normal((n, 2))
    elif params.init == "spectral":
        init = _spectral_init(graph, rng)
    else:
        init = rng.uniform(-10.0, 10.0, size=(n, 2))

    Yc = umap_optimize(graph, init, params, rng)
    out = np.empty((n, 2), dtype=np.float64)
    out[:] = Yc[inverse]
    return Embedding(
        Y=out,
        provenance={
            "algorithm": "umap",
            "n_neighbors": params.n_neighbors,
            "min_dist": params.min_dist,
            "spread": params.spread,
            "n_epochs": params.n_epochs,
            "negative_sample_rate": params.negative_sample_rate,
            "kernel_a": params.a,
            "kernel_b": params.b,
            "init": params.init,
            "seed": params.seed,
        },
    )
