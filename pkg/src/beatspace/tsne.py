"""Exact t-SNE: Gaussian neighbor affinities in data space, a one-degree
Student-t kernel in the 2-D embedding, and gradient descent on the
KL divergence between the two.

Per-point Gaussian bandwidths are calibrated by bisection so that each
conditional row reaches the requested perplexity (2 to the row entropy).
The optimizer is full-gradient descent with momentum, per-component
adaptive gains, and early exaggeration of the attractive term.

Embeddings are bitwise reproducible for a fixed seed, and permutation
equivariant: rows are processed in a canonical lexicographic order and
results scattered back, so shuffling the input only shuffles the output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .embedding import Embedding
from .neighbors import canonical_order, jitter_duplicates, pairwise_sq_dists
from .pca import pca_fit, pca_transform

__all__ = [
    "TsneParams",
    "perplexity_search",
    "conditional_affinities",
    "joint_affinities",
    "kl_and_gradient",
    "tsne_embed",
]

log = logging.getLogger(__name__)


@dataclass
class TsneParams:
    perplexity: float = 30.0
    learning_rate: float = 200.0
    n_iter: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250  # early phase: exaggerated P, momentum 0.5
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    seed: int = 0
    init: str = "pca"  # "pca" | "random"
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.perplexity <= 1:
            raise ValueError("perplexity must exceed 1")
        if self.n_iter < self.exaggeration_iters:
            raise ValueError("n_iter must cover the early exaggeration phase")
        if self.init not in ("pca", "random"):
            raise ValueError(f"unknown init {self.init!r}")


def _row_perplexities(sq_dists: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Perplexity 2^H of Gaussian rows p_j ~ exp(-d2_j / (2 sigma^2)).

    ``sq_dists`` is (R, M); entries set to +inf are excluded from the row.
    """
    logits = sq_dists / (-2.0 * sigmas[:, None] ** 2)
    shift = np.max(logits, axis=1, keepdims=True)
    shift[~np.isfinite(shift)] = 0.0
    w = np.exp(logits - shift)
    p = w / w.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0.0, p * np.log2(np.where(p > 0.0, p, 1.0)), 0.0)
    return 2.0 ** (-plogp.sum(axis=1))


def _calibrate_sigmas(
    sq_dists: np.ndarray, target: float, tol: float = 1e-5, max_iter: int = 200
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row bisection on sigma until 2^H matches the target perplexity.

    Returns (sigmas, converged).  Rows that cannot reach the target (for
    instance a target at or above the neighbor count) end not-converged
    with the best sigma found.
    """
    rows = np.asarray(sq_dists, dtype=np.float64)
    n = rows.shape[0]
    finite = np.isfinite(rows)
    if np.any(rows[finite] < 0):
        raise ValueError("squared distances must be non-negative")
    positive_per_row = ((rows > 0) & finite).sum(axis=1)
    if np.any(positive_per_row == 0):
        raise ValueError("duplicate point row: all neighbor distances are zero")

    sigma = np.ones(n)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    perp = _row_perplexities(rows, sigma)
    for _ in range(max_iter):
        diff = perp - target
        active &= np.abs(diff) > tol
        if not active.any():
            break
        low = active & (diff < 0)  # too peaked: widen
        high = active & (diff > 0)
        lo[low] = sigma[low]
        sigma[low] = np.where(np.isinf(hi[low]), sigma[low] * 2.0, (sigma[low] + hi[low]) / 2.0)
        hi[high] = sigma[high]
        sigma[high] = np.where(lo[high] == 0.0, sigma[high] / 2.0, (sigma[high] + lo[high]) / 2.0)
        perp[active] = _row_perplexities(rows[active], sigma[active])
    converged = np.abs(perp - target) <= tol
    return sigma, converged


def perplexity_search(
    sq_dist_row: np.ndarray, target_perplexity: float, tol: float = 1e-5, max_iter: int = 200
) -> tuple[float, bool]:
    """Bisect one row's Gaussian bandwidth to the target perplexity.

    Returns (sigma, converged); unreachable targets come back flagged
    ``converged=False`` with the best-effort sigma.
    """
    row = np.asarray(sq_dist_row, dtype=np.float64).reshape(1, -1)
    sigma, converged = _calibrate_sigmas(row, target_perplexity, tol, max_iter)
    return float(sigma[0]), bool(converged[0])


def conditional_affinities(sq_dists: np.ndarray, perplexity: float, chunk: int = 1024) -> np.ndarray:
    """Row-normalized Gaussian affinities at the calibrated bandwidths.

    ``sq_dists`` is the full (N, N) squared-distance matrix; the diagonal
    is excluded and comes back zero.
    """
    n = sq_dists.shape[0]
    P = np.empty((n, n), dtype=np.float64)
    missed = 0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = np.array(sq_dists[start:stop], dtype=np.float64)
        rows = np.arange(start, stop)
        block[rows - start, rows] = np.inf
        sigmas, converged = _calibrate_sigmas(block, perplexity)
        missed += int((~converged).sum())
        logits = block / (-2.0 * sigmas[:, None] ** 2)
        shift = np.max(logits, axis=1, keepdims=True)
        shift[~np.isfinite(shift)] = 0.0
        w = np.exp(logits - shift)
        w[rows - start, rows] = 0.0
        w /= w.sum(axis=1, keepdims=True)
        P[start:stop] = w
    if missed:
        log.warning("perplexity calibration missed tolerance on %d/%d rows", missed, n)
    return P


def joint_affinities(sq_dists: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized affinities p_ij = (p_j|i + p_i|j) / 2N; sums to 1."""
    P = conditional_affinities(sq_dists, perplexity)
    PT = P.T.copy()
    P += PT
    del PT
    P /= 2.0 * P.shape[0]
    return P


def _p_log_p(P: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, P.shape[0], chunk):
        block = np.asarray(P[start : start + chunk], dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(block > 0.0, block * np.log(np.where(block > 0.0, block, 1.0)), 0.0)
        total += float(t.sum())
    return total


def _student_t_kernel(Y: np.ndarray, bufW: np.ndarray) -> float:
    """Fill bufW with w_ij = 1/(1 + |y_i-y_j|^2), zero diagonal; return its sum.

    Rounding in the squared-distance expansion can leave 1 + d2 slightly
    below 1 but never at 0, so the reciprocal is safe without clamping.
    """
    sq = np.einsum("ij,ij->i", Y, Y)
    np.dot(Y, Y.T, out=bufW)
    bufW *= -2.0
    bufW += sq[:, None]
    bufW += sq[None, :]
    bufW += 1.0
    np.reciprocal(bufW, out=bufW)
    idx = np.arange(Y.shape[0])
    bufW[idx, idx] = 0.0
    return float(bufW.sum())


def _kl_from_kernel(P: np.ndarray, bufW: np.ndarray, Z: float, p_log_p: float, chunk: int = 1024) -> float:
    """KL(P||Q) with Q = W/Z, accumulated in float64 without extra N^2 buffers."""
    n = P.shape[0]
    cross = 0.0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        w = np.array(bufW[start:stop], dtype=np.float64)
        rows = np.arange(start, stop)
        w[rows - start, rows] = 1.0  # log(1) = 0 against the zero diagonal of P
        cross += float(np.sum(P[start:stop] * np.log(w), dtype=np.float64))
    return p_log_p - cross + float(np.log(Z))


def _forces_from_kernel(P: np.ndarray, exaggeration: float, bufW: np.ndarray, Z: float, bufF: np.ndarray) -> None:
    """bufF <- (exaggeration*P - W/Z) * W; destroys bufW."""
    np.multiply(P, bufW, out=bufF)
    if exaggeration != 1.0:
        bufF *= exaggeration
    bufW *= bufW
    bufW *= 1.0 / Z
    bufF -= bufW


def kl_and_gradient(P: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(P||Q) and its exact gradient wrt the embedding coordinates.

    grad_i = 4 * sum_j (p_ij - q_ij) * w_ij * (y_i - y_j)
    """
    Y = np.asarray(Y, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    n = Y.shape[0]
    bufW = np.empty((n, n), dtype=np.float64)
    bufF = np.empty((n, n), dtype=np.float64)
    Z = _student_t_kernel(Y, bufW)
    kl = _kl_from_kernel(P, bufW, Z, _p_log_p(P))
    _forces_from_kernel(P, 1.0, bufW, Z, bufF)
    grad = 4.0 * (bufF.sum(axis=1)[:, None] * Y - bufF @ Y)
    return kl, grad


def _pca_init(X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    model = pca_fit(X, 2)
    scores = pca_transform(model, X)
    spread = scores[:, 0].std()
    if spread == 0.0:
        return rng.standard_normal((X.shape[0], 2)) * 1e-4
    return scores / spread * 1e-4


def tsne_embed(X: np.ndarray, params: TsneParams | None = None) -> Embedding:
    """Embed rows of X into 2-D by minimizing KL(P||Q).

    Raises on fully degenerate input (all rows identical); partial
    duplicates are jittered by 1e-9 with a warning.
    """
    params = params or TsneParams()
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 4:
        raise ValueError("need at least 4 points")
    if params.perplexity >= n:
        raise ValueError(f"perplexity {params.perplexity} must be below the point count {n}")
    if np.all(X == X[0]):
        raise ValueError("duplicate point row: all inputs identical")

    perm = canonical_order(X)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(n)
    Xc = X[perm]
    rng = np.random.default_rng(params.seed)
    Xc = jitter_duplicates(Xc, rng)

    # Large problems run the optimizer in float32; distances and affinity
    # calibration stay in float64 blocks either way.
    big = n > 2000
    D2 = pairwise_sq_dists(Xc.astype(np.float32) if big else Xc)
    P64 = joint_affinities(D2, params.perplexity)
    del D2
    dtype = np.float32 if big else np.float64
    P = P64.astype(dtype, copy=False)
    del P64
    p_log_p = _p_log_p(P)

    if params.init == "pca":
        Y = _pca_init(Xc, rng).astype(dtype)
    else:
        Y = (rng.standard_normal((n, 2)) * 1e-4).astype(dtype)

    bufW = np.empty((n, n), dtype=dtype)
    bufF = np.empty((n, n), dtype=dtype)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_trace: list[tuple[int, float]] = []

    for it in range(1, params.n_iter + 1):
        exag = params.early_exaggeration if it <= params.exaggeration_iters else 1.0
        momentum = params.momentum_early if it <= params.exaggeration_iters else params.momentum_late

        Z = _student_t_kernel(Y, bufW)
        if it % params.log_every == 0 or it == params.n_iter:
            kl = _kl_from_kernel(P, bufW, Z, p_log_p)
            kl_trace.append((it, kl))
            log.info("tsne iter %d/%d KL=%.6f", it, params.n_iter, kl)
        _forces_from_kernel(P, exag, bufW, Z, bufF)
        grad = 4.0 * (bufF.sum(axis=1)[:, None] * Y - bufF @ Y)
        if not np.isfinite(grad).all():
            raise RuntimeError(f"non-finite gradient at iteration {it} (|Y|max={np.abs(Y).max():.3g})")

        flip = update * grad < 0.0
        gains[flip] += 0.2
        gains[~flip] *= 0.8
        np.maximum(gains, 0.01, out=gains)
        update *= momentum
        update -= params.learning_rate * gains * grad
        Y += update
        Y -= Y.mean(axis=0)

    out = np.empty((n, 2), dtype=np.float64)
    out[:] = Y[inverse]
    return Embedding(
        Y=out,
        provenance={
            "algorithm": "tsne",
            "perplexity": params.perplexity,
            "learning_rate": params.learning_rate,
            "n_iter": params.n_iter,
            "early_exaggeration": params.early_exaggeration,
            "exaggeration_iters": params.exaggeration_iters,
            "init": params.init,
            "seed": params.seed,
            "kl_final": kl_trace[-1][1] if kl_trace else float("nan"),
            "kl_trace": kl_trace,
        },
    )
