"""Label-free cluster extraction from 2-D embeddings.

The scatter plot is rasterized onto a square occupancy grid (data-derived
bounds with a 2% margin), dilated to bridge within-cluster gaps, and
split into 8-connected components.  Components are ranked largest to
smallest by member point count, and each cluster is profiled by its mean
and per-sample variance waveform, label composition, and a seeded sample
of representative beats.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .beats import AAMI_ORDER, BeatMatrix

__all__ = [
    "OccupancyGrid",
    "ClusterProfile",
    "ClusterReport",
    "rasterize",
    "connected_components",
    "assign_and_profile",
    "dominant_label",
    "extract_clusters",
]


@dataclass
class OccupancyGrid:
    resolution: int
    occupied: np.ndarray  # (R, R) bool, after dilation
    raw_occupied: np.ndarray  # before dilation; exactly the cells holding points
    cell_of_point: np.ndarray  # (N, 2) int cell index per embedding point
    x_bounds: tuple[float, float]
    y_bounds: tuple[float, float]
    degenerate: bool = False


@dataclass
class ClusterProfile:
    rank: int  # 1 = largest
    member_indices: np.ndarray
    size: int
    mean_waveform: np.ndarray
    variance_waveform: np.ndarray
    symbol_counts: dict
    aami_counts: dict
    representative_indices: np.ndarray


@dataclass
class ClusterReport:
    clusters: list[ClusterProfile]

    def __len__(self) -> int:
        return len(self.clusters)


def _axis_bounds(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    if span == 0.0:
        # Degenerate axis: give it a unit span so cell indexing stays valid.
        return lo - 0.5, hi + 0.5
    margin = 0.02 * span
    return lo - margin, hi + margin


def rasterize(Y: np.ndarray, resolution: int = 512, dilation_radius: int = 1) -> OccupancyGrid:
    """Occupancy grid of the embedding, dilated by a square structuring element."""
    Y = np.asarray(Y, dtype=np.float64)
    if not np.isfinite(Y).all():
        raise ValueError("embedding contains non-finite coordinates")
    if Y.ndim != 2 or Y.shape[1] != 2:
        raise ValueError("expected an (N, 2) embedding")

    degenerate = bool(np.all(Y == Y[0]))
    if degenerate:
        warnings.warn("all points identical: rasterizing to a single cell")
        resolution = 1
    elif resolution < 16:
        raise ValueError("resolution must be at least 16")

    xb = _axis_bounds(Y[:, 0])
    yb = _axis_bounds(Y[:, 1])
    # Normalize into [0, 1) before scaling so the partition is invariant
    # to translation and uniform scaling of the embedding.
    u = (Y[:, 0] - xb[0]) / (xb[1] - xb[0])
    v = (Y[:, 1] - yb[0]) / (yb[1] - yb[0])
    cells = np.empty((Y.shape[0], 2), dtype=np.int64)
    cells[:, 0] = np.clip((u * resolution).astype(np.int64), 0, resolution - 1)
    cells[:, 1] = np.clip((v * resolution).astype(np.int64), 0, resolution - 1)

    raw = np.zeros((resolution, resolution), dtype=bool)
    raw[cells[:, 0], cells[:, 1]] = True
    if dilation_radius > 0:
        footprint = np.ones((2 * dilation_radius + 1,) * 2, dtype=bool)
        occupied = ndimage.binary_dilation(raw, structure=footprint)
    else:
        occupied = raw.copy()
    return OccupancyGrid(
        resolution=resolution,
        occupied=occupied,
        raw_occupied=raw,
        cell_of_point=cells,
        x_bounds=xb,
        y_bounds=yb,
        degenerate=degenerate,
    )


def connected_components(grid: OccupancyGrid, connectivity: int = 8) -> np.ndarray:
    """Component rank (1 = most member points) per occupied cell, 0 elsewhere.

    Ties by point count break on the first-occupied cell in row-major order,
    which is the order the underlying labeling assigns ids.
    """
    if connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    elif connectivity == 4:
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, n_components = ndimage.label(grid.occupied, structure=structure)
    if n_components == 0:
        return labels

    point_labels = labels[grid.cell_of_point[:, 0], grid.cell_of_point[:, 1]]
    sizes = np.bincount(point_labels, minlength=n_components + 1)[1:]
    # Stable sort: descending point count, ascending original id on ties.
    order = np.lexsort((np.arange(1, n_components + 1), -sizes))
    remap = np.zeros(n_components + 1, dtype=labels.dtype)
    remap[order + 1] = np.arange(1, n_components + 1)
    return remap[labels]


def assign_and_profile(
    bm: BeatMatrix, Y: np.ndarray, components: np.ndarray, grid: OccupancyGrid, seed: int = 0
) -> ClusterReport:
    """Profile each component: waveform statistics, label histograms, and
    10 seeded representative beats (all members when smaller)."""
    point_comp = components[grid.cell_of_point[:, 0], grid.cell_of_point[:, 1]]
    if (point_comp == 0).any():
        raise AssertionError("every point's cell must be inside a component")
    n_components = int(point_comp.max())
    rng = np.random.default_rng(seed)

    clusters = []
    for rank in range(1, n_components + 1):
        members = np.flatnonzero(point_comp == rank)
        waves = bm.X[members].astype(np.float64)
        mean = waves.mean(axis=0)
        variance = waves.var(axis=0)
        symbols, sym_counts = np.unique(np.asarray(bm.symbol[members], dtype=str), return_counts=True)
        aamis, aami_counts = np.unique(np.asarray(bm.aami[members], dtype=str), return_counts=True)
        if members.size > 10:
            reps = rng.choice(members, size=10, replace=False)
        else:
            reps = members.copy()
        clusters.append(
            ClusterProfile(
                rank=rank,
                member_indices=members,
                size=members.size,
                mean_waveform=mean,
                variance_waveform=variance,
                symbol_counts=dict(zip(symbols.tolist(), sym_counts.tolist())),
                aami_counts=dict(zip(aamis.tolist(), aami_counts.tolist())),
                representative_indices=reps,
            )
        )
    return ClusterReport(clusters=clusters)


def dominant_label(cluster: ClusterProfile) -> tuple[str, float]:
    """Modal AAMI class and its fraction; ties break in N,S,V,F,Q,O order."""
    if not cluster.aami_counts:
        raise ValueError("empty cluster")
    best = max(
        cluster.aami_counts.items(),
        key=lambda kv: (kv[1], -AAMI_ORDER.index(kv[0]) if kv[0] in AAMI_ORDER else -len(AAMI_ORDER)),
    )
    return best[0], best[1] / cluster.size


def extract_clusters(
    bm: BeatMatrix,
    Y: np.ndarray,
    resolution: int = 512,
    dilation_radius: int = 1,
    connectivity: int = 8,
    seed: int = 0,
) -> ClusterReport:
    """Rasterize, label, and profile in one call."""
    grid = rasterize(Y, resolution=resolution, dilation_radius=dilation_radius)
    components = connected_components(grid, connectivity=connectivity)
    return assign_and_profile(bm, Y, components, grid, seed=seed)
