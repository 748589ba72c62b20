import numpy as np
import pytest

from beatspace.beats import BeatMatrix
from beatspace.clusters import (
    OccupancyGrid,
    assign_and_profile,
    connected_components,
    dominant_label,
    extract_clusters,
    rasterize,
)


def make_matrix(waveforms, symbols=None, aamis=None):
    n = len(waveforms)
    symbols = symbols or ["N"] * n
    aamis = aamis or ["N"] * n
    return BeatMatrix(
        X=np.asarray(waveforms, dtype=np.float32),
        lead="MLII",
        record_id=np.array(["116"] * n, dtype=object),
        r_sample=np.arange(n, dtype=np.int64),
        symbol=np.array(symbols, dtype=object),
        aami=np.array(aamis, dtype=object),
        gender=np.array(["male"] * n, dtype=object),
    )


class TestRasterize:
    def test_single_point_single_cell(self):
        with pytest.warns(UserWarning, match="single cell"):
            grid = rasterize(np.array([[2.0, 3.0]]), resolution=512, dilation_radius=1)
        assert grid.occupied.shape == (1, 1)
        assert grid.occupied.sum() == 1
        assert grid.degenerate

    def test_two_corner_points_disjoint_islands(self):
        Y = np.array([[0.0, 0.0], [1.0, 1.0]])
        grid = rasterize(Y, resolution=64, dilation_radius=1)
        # each corner-adjacent cell dilates into a small block; islands stay apart
        assert grid.raw_occupied.sum() == 2
        from scipy import ndimage

        labels, n = ndimage.label(grid.occupied, structure=np.ones((3, 3)))
        assert n == 2

    def test_occupied_support_matches_binning_oracle(self):
        rng = np.random.default_rng(0)
        Y = rng.standard_normal((100, 2))
        resolution = 32
        grid = rasterize(Y, resolution=resolution, dilation_radius=0)

        # independent binning: same bounds definition, plain Python floor
        cells = set()
        for x, y in Y:
            spans = []
            for axis, v in ((0, x), (1, y)):
                lo, hi = float(Y[:, axis].min()), float(Y[:, axis].max())
                m = 0.02 * (hi - lo)
                u = (v - (lo - m)) / ((hi + m) - (lo - m))
                spans.append(min(int(u * resolution), resolution - 1))
            cells.add(tuple(spans))
        assert grid.occupied.sum() == len(cells)

    def test_every_point_maps_into_grid(self):
        rng = np.random.default_rng(1)
        Y = rng.uniform(-5, 5, size=(200, 2))
        grid = rasterize(Y, resolution=64)
        assert grid.cell_of_point.min() >= 0
        assert grid.cell_of_point.max() < 64
        assert grid.raw_occupied[grid.cell_of_point[:, 0], grid.cell_of_point[:, 1]].all()

    def test_resolution_floor(self):
        with pytest.raises(ValueError, match="resolution"):
            rasterize(np.array([[0.0, 0.0], [1.0, 1.0]]), resolution=8)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            rasterize(np.array([[0.0, np.nan]]))


def flood_fill_partition(mask):
    """Oracle: 8-connected components via explicit stack-based flood fill."""
    comp = -np.ones(mask.shape, dtype=int)
    current = 0
    rows, cols = mask.shape
    for r in range(rows):
        for c in range(cols):
            if mask[r, c] and comp[r, c] < 0:
                stack = [(r, c)]
                comp[r, c] = current
                while stack:
                    y, x = stack.pop()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = y + dy, x + dx
                            if 0 <= ny < rows and 0 <= nx < cols and mask[ny, nx] and comp[ny, nx] < 0:
                                comp[ny, nx] = current
                                stack.append((ny, nx))
                current += 1
    return comp


class TestConnectedComponents:
    def _grid_from_mask(self, mask):
        cells = np.argwhere(mask)  # one synthetic point per occupied cell
        return OccupancyGrid(
            resolution=mask.shape[0],
            occupied=mask,
            raw_occupied=mask.copy(),
            cell_of_point=cells,
            x_bounds=(0.0, 1.0),
            y_bounds=(0.0, 1.0),
        )

    def test_single_cell(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[5, 5] = True
        labels = connected_components(self._grid_from_mask(mask))
        assert labels.max() == 1
        assert labels[5, 5] == 1

    def test_two_separated_islands(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[2:4, 2:4] = True
        mask[10:13, 10:13] = True
        labels = connected_components(self._grid_from_mask(mask))
        assert labels.max() == 2
        # the 9-cell island outranks the 4-cell island
        assert labels[10, 10] == 1 and labels[2, 2] == 2

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(2)
        mask = rng.random((20, 20)) < 0.35
        labels = connected_components(self._grid_from_mask(mask))
        oracle = flood_fill_partition(mask)
        # identical partitions: component ids must correspond one-to-one
        assert labels.max() == oracle.max() + 1
        mapping = {}
        for r in range(20):
            for c in range(20):
                if mask[r, c]:
                    pair = (oracle[r, c], labels[r, c])
                    mapping.setdefault(pair[0], pair[1])
                    assert mapping[pair[0]] == pair[1]
        assert not np.any(labels[~mask])

    def test_4_connectivity_splits_diagonals(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[3, 3] = mask[4, 4] = True
        grid = self._grid_from_mask(mask)
        assert connected_components(grid, connectivity=8).max() == 1
        assert connected_components(grid, connectivity=4).max() == 2

    def test_ranking_by_point_count_not_cell_count(self):
        # island A: 1 cell, 10 points; island B: 4 cells, 4 points
        mask = np.zeros((16, 16), dtype=bool)
        mask[2, 2] = True
        mask[10:12, 10:12] = True
        points = np.vstack([np.tile([2, 2], (10, 1)), np.argwhere(mask[10:12, 10:12]) + 10])
        grid = OccupancyGrid(
            resolution=16, occupied=mask, raw_occupied=mask.copy(),
            cell_of_point=points, x_bounds=(0, 1), y_bounds=(0, 1),
        )
        labels = connected_components(grid)
        assert labels[2, 2] == 1  # more points wins despite fewer cells


class TestAssignAndProfile:
    def _run(self, waveforms, Y, **kwargs):
        bm = make_matrix(waveforms, **kwargs)
        grid = rasterize(np.asarray(Y, dtype=float), resolution=64, dilation_radius=1)
        comps = connected_components(grid)
        return assign_and_profile(bm, Y, comps, grid)

    def test_identical_waveforms_zero_variance(self):
        # a distant anchor point sets the grid scale so the trio shares a cell
        w = np.linspace(0, 1, 256)
        anchor = np.full(256, 9.0)
        report = self._run([w, w, w, anchor], [[0, 0], [0.01, 0], [0, 0.01], [100, 100]])
        assert len(report) == 2
        assert report.clusters[0].size == 3
        assert np.all(report.clusters[0].variance_waveform == 0.0)

    def test_antisymmetric_pair(self):
        w = np.sin(np.linspace(0, 6, 256))
        anchor = np.full(256, 9.0)
        report = self._run([w, -w, anchor], [[0, 0], [0.01, 0.01], [100, 100]])
        c = report.clusters[0]
        assert c.size == 2
        assert np.allclose(c.mean_waveform, 0.0, atol=1e-8)
        assert np.allclose(c.variance_waveform, w.astype(np.float32) ** 2, rtol=1e-5)

    def test_two_group_histograms(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((30, 256))
        Y = np.vstack([rng.normal(0, 0.05, (20, 2)), rng.normal(10, 0.05, (10, 2))])
        symbols = ["N"] * 14 + ["V"] * 6 + ["A"] * 10
        aamis = ["N"] * 14 + ["V"] * 6 + ["S"] * 10
        report = self._run(list(w), Y, symbols=symbols, aamis=aamis)
        assert len(report) == 2
        big, small = report.clusters
        assert big.size == 20 and small.size == 10
        assert big.symbol_counts == {"N": 14, "V": 6}
        assert big.aami_counts == {"N": 14, "V": 6}
        assert small.symbol_counts == {"A": 10}

    def test_representatives_seeded_and_capped(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((41, 256))
        Y = np.vstack([rng.normal(0, 0.05, (40, 2)), [[100.0, 100.0]]])
        bm = make_matrix(list(w))
        grid = rasterize(Y, resolution=64, dilation_radius=2)
        comps = connected_components(grid)
        a = assign_and_profile(bm, Y, comps, grid, seed=1)
        b = assign_and_profile(bm, Y, comps, grid, seed=1)
        c = assign_and_profile(bm, Y, comps, grid, seed=2)
        assert a.clusters[0].size == 40
        assert len(a.clusters[0].representative_indices) == 10
        assert np.array_equal(a.clusters[0].representative_indices, b.clusters[0].representative_indices)
        assert not np.array_equal(a.clusters[0].representative_indices, c.clusters[0].representative_indices)

    def test_small_cluster_keeps_all_members(self):
        w = np.zeros((4, 256))
        report = self._run(list(w), [[0, 0], [0.01, 0], [0, 0.01], [100, 100]])
        assert np.array_equal(
            np.sort(report.clusters[0].representative_indices), np.arange(3)
        )

    def test_profile_matches_brute_force(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((25, 256)).astype(np.float32)
        Y = np.vstack([rng.normal(0, 0.05, (15, 2)), rng.normal(8, 0.05, (10, 2))])
        report = self._run(list(w), Y)
        members = report.clusters[0].member_indices
        assert np.array_equal(report.clusters[0].mean_waveform, w[members].astype(np.float64).mean(0))
        assert np.array_equal(report.clusters[0].variance_waveform, w[members].astype(np.float64).var(0))


class TestDominantLabel:
    def _cluster(self, aami_counts, size=None):
        from beatspace.clusters import ClusterProfile

        size = size or sum(aami_counts.values())
        return ClusterProfile(
            rank=1, member_indices=np.arange(size), size=size,
            mean_waveform=np.zeros(256), variance_waveform=np.zeros(256),
            symbol_counts={}, aami_counts=aami_counts,
            representative_indices=np.arange(min(10, size)),
        )

    def test_pure_cluster(self):
        assert dominant_label(self._cluster({"V": 12})) == ("V", 1.0)

    def test_mixed_cluster(self):
        label, purity = dominant_label(self._cluster({"N": 6, "V": 4}))
        assert label == "N" and purity == pytest.approx(0.6)

    def test_tie_breaks_in_aami_order(self):
        assert dominant_label(self._cluster({"V": 5, "S": 5}))[0] == "S"
        assert dominant_label(self._cluster({"O": 5, "N": 5}))[0] == "N"


class TestInvariance:
    def test_partition_invariant_to_affine_rescale(self):
        rng = np.random.default_rng(6)
        Y = np.vstack([rng.normal(0, 0.3, (40, 2)), rng.normal(6, 0.3, (30, 2))])
        bm = make_matrix(list(rng.standard_normal((70, 256))))
        base = extract_clusters(bm, Y, resolution=128, dilation_radius=1)
        scaled = extract_clusters(bm, 3.0 * Y + 7.0, resolution=128, dilation_radius=1)
        assert len(base) == len(scaled)
        for c1, c2 in zip(base.clusters, scaled.clusters):
            assert np.array_equal(c1.member_indices, c2.member_indices)

    def test_clusters_partition_all_points(self):
        rng = np.random.default_rng(7)
        Y = rng.standard_normal((200, 2))
        bm = make_matrix(list(rng.standard_normal((200, 256))))
        report = extract_clusters(bm, Y, resolution=64, dilation_radius=1)
        all_members = np.concatenate([c.member_indices for c in report.clusters])
        assert np.array_equal(np.sort(all_members), np.arange(200))
        sizes = [c.size for c in report.clusters]
        assert sizes == sorted(sizes, reverse=True)
