"""Principal component analysis via eigendecomposition of the sample covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PcaModel", "pca_fit", "pca_transform"]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (n,)
    components: np.ndarray  # (d, n) orthonormal rows, leading variance first
    eigenvalues: np.ndarray  # (d,) descending, non-negative


def pca_fit(X: np.ndarray, d: int) -> PcaModel:
    """Top-d eigenpairs of the covariance of mean-centered X.

    Components are sign-fixed so that each row's largest-magnitude entry
    is positive, which makes the decomposition deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a 2-D matrix with at least 2 rows")
    n_rows, n_cols = X.shape
    if not 1 <= d <= min(n_rows, n_cols):
        raise ValueError(f"component count {d} out of range [1, {min(n_rows, n_cols)}]")

    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / (n_rows - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigenvalues)[::-1][:d]
    components = eigenvectors[:, order].T.copy()
    eigenvalues = np.maximum(eigenvalues[order], 0.0)

    for row in components:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=components, eigenvalues=eigenvalues)


def pca_transform(model: PcaModel, X: np.ndarray) -> np.ndarray:
    """Project rows of X onto the model's components: (X - mean) @ components.T."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.mean.shape[0]:
        raise ValueError(
            f"matrix with {X.shape[-1]} columns does not match model dimension {model.mean.shape[0]}"
        )
    return (X - model.mean) @ model.components.T
