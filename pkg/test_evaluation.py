"""Tests for point-cloud extraction and the accuracy/completeness/outlier metrics."""

import numpy as np
import pandas as pd
import pytest

from errors import InvalidParameterError, ShapeError, UndefinedMetricError
from evaluation import (
    EvalConfig,
    Metrics,
    PointCloud,
    accuracy,
    completeness,
    evaluate,
    extract_point_cloud,
    nearest_distances,
    outlier_pct,
    truth_point_cloud,
)
from exporters import append_metrics_csv
from geometry import ElevationGrid


@pytest.fixture
def grid():
    return ElevationGrid(11, -5.0, 5.0)


def cloud(xyz, amplitude=1.0):
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    return PointCloud(np.column_stack([xyz, np.full(len(xyz), amplitude)]))


def brute_force(queries, refs):
    return np.array([min(np.linalg.norm(q - r) for r in refs) for q in queries])


class TestExtraction:
    def test_one_hot(self, grid):
        volume = np.zeros((11, 3, 2), dtype=complex)
        volume[7, 2, 1] = 0.5j
        points = extract_point_cloud(volume, grid, azimuth_spacing=2.0, range_spacing=3.0).points
        np.testing.assert_array_equal(points, [[4.0, 3.0, 2.0, 0.5]])

    def test_all_zero(self, grid):
        assert len(extract_point_cloud(np.zeros((11, 2, 2)), grid)) == 0

    def test_two_peaks_separated_by_zero(self, grid):
        volume = np.zeros((11, 1, 1))
        volume[[3, 5], 0, 0] = 1.0
        points = extract_point_cloud(volume, grid).points
        np.testing.assert_array_equal(points[:, 2], grid.centers[[3, 5]])

    def test_lobe_gives_single_point(self, grid):
        volume = np.zeros((11, 1, 1))
        volume[3:8, 0, 0] = [0.3, 0.8, 1.0, 0.8, 0.3]
        points = extract_point_cloud(volume, grid).points
        assert len(points) == 1 and points[0, 2] == grid.centers[5]

    def test_flat_top_gives_single_point(self, grid):
        volume = np.zeros((11, 1, 1))
        volume[4:6, 0, 0] = 1.0
        assert len(extract_point_cloud(volume, grid)) == 1

    def test_threshold_is_relative_to_global_max(self, grid):
        volume = np.zeros((11, 2, 1))
        volume[2, 0, 0] = 1.0
        volume[8, 1, 0] = 0.15
        assert len(extract_point_cloud(volume, grid, threshold_rel=0.2)) == 1
        assert len(extract_point_cloud(volume, grid, threshold_rel=0.1)) == 2

    def test_row_order(self, grid):
        volume = np.zeros((11, 2, 2))
        volume[1, 1, 0] = volume[9, 0, 1] = volume[4, 0, 0] = 1.0
        points = extract_point_cloud(volume, grid).points
        np.testing.assert_array_equal(points[:, :2], [[0, 0], [0, 1], [1, 0]])

    def test_truth_cloud_keeps_every_nonzero(self, grid):
        volume = np.zeros((11, 1, 1))
        volume[4:6, 0, 0] = [1.0, 2.0]
        assert len(truth_point_cloud(volume, grid)) == 2

    def test_wrong_bins(self, grid):
        with pytest.raises(ShapeError):
            extract_point_cloud(np.zeros((10, 1, 1)), grid)

    def test_point_cloud_rejects_zero_amplitude(self):
        with pytest.raises(InvalidParameterError):
            PointCloud(np.array([[0.0, 0.0, 0.0, 0.0]]))


class TestNearestNeighbours:
    @pytest.mark.parametrize("seed", range(3))
    def test_backends_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        queries = rng.uniform(-20, 20, (700, 3))
        refs = rng.uniform(-20, 20, (300, 3))
        oracle = brute_force(queries, refs)
        np.testing.assert_allclose(nearest_distances(queries, refs, 'brute'), oracle, rtol=1e-12)
        np.testing.assert_array_equal(nearest_distances(queries, refs, 'kdtree'),
                                      nearest_distances(queries, refs, 'brute'))

    def test_no_references(self):
        with pytest.raises(UndefinedMetricError):
            nearest_distances(np.zeros((2, 3)), np.zeros((0, 3)))

    def test_kdtree_ties_match_brute(self):
        # lattice queries at cell centres are equidistant from 8 references
        axis = np.arange(6, dtype=float) * 0.7
        refs = np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3)
        queries = np.concatenate([refs[:40] + 0.35, refs[:40], refs[:40] + [0.35, 0.0, 0.0]])
        np.testing.assert_array_equal(nearest_distances(queries, refs, 'kdtree'),
                                      nearest_distances(queries, refs, 'brute'))

    def test_kdtree_no_queries(self):
        assert nearest_distances(np.zeros((0, 3)), np.ones((2, 3)), 'kdtree').shape == (0,)

    def test_unknown_method(self):
        with pytest.raises(InvalidParameterError):
            nearest_distances(np.zeros((1, 3)), np.zeros((1, 3)), 'octree')


class TestMetrics:
    @pytest.fixture
    def planted(self):
        rng = np.random.default_rng(42)
        truth = cloud(rng.uniform(0, 10, (10, 3)))
        recon = cloud(truth.xyz + rng.normal(0, 0.2, (10, 3)))
        return recon, truth

    def test_identity(self, planted):
        _, truth = planted
        assert accuracy(truth, truth, 1.0) == 0.0
        assert completeness(truth, truth) == 0.0
        assert outlier_pct(truth, truth, 1.0) == 0.0

    def test_uniform_shift(self, planted):
        _, truth = planted
        shifted = truth.translated((0.0, 0.0, 0.01))
        assert accuracy(shifted, truth, 1.0) == pytest.approx(0.01)
        assert completeness(shifted, truth) == pytest.approx(0.01)

    @pytest.mark.parametrize("method", ['brute', 'kdtree'])
    def test_planted_against_oracle(self, planted, method):
        recon, truth = planted
        to_truth = brute_force(recon.xyz, truth.xyz)
        to_recon = brute_force(truth.xyz, recon.xyz)
        assert accuracy(recon, truth, 0.5, method) == pytest.approx(to_truth[to_truth <= 0.5].mean())
        assert completeness(recon, truth, method) == pytest.approx(to_recon.mean())
        assert outlier_pct(recon, truth, 0.3, method) == pytest.approx(100.0 * np.mean(to_truth > 0.3))

    def test_one_of_four_displaced(self):
        truth = cloud([[0, 0, 0], [5, 0, 0], [0, 5, 0], [5, 5, 0]])
        recon = cloud([[0, 0, 0], [5, 0, 0], [0, 5, 0], [5, 5, 4]])
        assert outlier_pct(recon, truth, 1.0) == 25.0
        # the displaced point is excluded from the accuracy mean
        assert accuracy(recon, truth, 1.0) == 0.0
        assert completeness(recon, truth) == pytest.approx(1.0)

    def test_outliers_monotone_in_tau(self, planted):
        recon, truth = planted
        values = [outlier_pct(recon, truth, tau) for tau in np.linspace(0.05, 1.0, 10)]
        assert all(later <= earlier for earlier, later in zip(values, values[1:]))

    def test_translation_invariance(self, planted):
        recon, truth = planted
        offset = (12.5, -3.0, 7.25)
        moved_recon, moved_truth = recon.translated(offset), truth.translated(offset)
        assert accuracy(moved_recon, moved_truth, 0.5) == pytest.approx(accuracy(recon, truth, 0.5), abs=1e-12)
        assert completeness(moved_recon, moved_truth) == pytest.approx(completeness(recon, truth), abs=1e-12)
        assert outlier_pct(moved_recon, moved_truth, 0.3) == outlier_pct(recon, truth, 0.3)

    def test_empty_clouds_undefined(self, planted):
        recon, truth = planted
        empty = cloud(np.zeros((0, 3)))
        with pytest.raises(UndefinedMetricError):
            accuracy(empty, truth, 1.0)
        with pytest.raises(UndefinedMetricError):
            completeness(recon, empty)
        with pytest.raises(UndefinedMetricError):
            outlier_pct(empty, truth, 1.0)

    def test_no_inliers_gives_nan_accuracy(self):
        recon, truth = cloud([[0, 0, 100]]), cloud([[0, 0, 0]])
        assert np.isnan(accuracy(recon, truth, 1.0))
        assert outlier_pct(recon, truth, 1.0) == 100.0


class TestEvaluate:
    def test_identical_volumes(self, grid):
        volume = np.zeros((11, 4, 2))
        volume[[2, 5, 8, 3], [0, 1, 2, 3], [0, 1, 0, 1]] = [1.0, 0.5, 0.8, 0.9]
        metrics = evaluate(volume.astype(complex), volume, grid, method='oracle')
        assert (metrics.accuracy, metrics.completeness, metrics.outlier_pct) == (0.0, 0.0, 0.0)
        assert metrics.method == 'oracle'

    def test_one_bin_displacement(self, grid):
        truth = np.zeros((11, 1, 1))
        truth[4, 0, 0] = 1.0
        recon = np.zeros((11, 1, 1), dtype=complex)
        recon[5, 0, 0] = 1.0
        metrics = evaluate(recon, truth, grid, wall_time_seconds=1.5)
        assert metrics.accuracy == pytest.approx(grid.spacing)
        assert metrics.completeness == pytest.approx(grid.spacing)
        assert metrics.outlier_pct == 0.0
        assert metrics.wall_time_seconds == 1.5

    def test_explicit_cutoffs(self, grid):
        cfg = EvalConfig(inlier_tau=0.5, tau=2.0)
        assert cfg.cutoffs(grid) == (0.5, 2.0)
        assert EvalConfig(tau_bins=2.0).cutoffs(grid) == (2.0, 2.0)

    def test_no_inliers_still_scored(self, grid, tmp_path):
        truth = np.zeros((11, 1, 1))
        truth[0, 0, 0] = 1.0
        recon = np.zeros((11, 1, 1), dtype=complex)
        recon[10, 0, 0] = 1.0
        metrics = evaluate(recon, truth, grid, method='far')
        assert np.isnan(metrics.accuracy)
        assert metrics.outlier_pct == 100.0
        assert metrics.completeness == pytest.approx(10 * grid.spacing)
        table = append_metrics_csv(metrics, tmp_path / 'metrics.csv')
        assert np.isnan(pd.read_csv(tmp_path / 'metrics.csv')['accuracy'][0])
        assert len(table) == 1

    def test_shape_mismatch(self, grid):
        with pytest.raises(ShapeError):
            evaluate(np.zeros((11, 2, 1)), np.zeros((11, 1, 1)), grid)

    def test_empty_reconstruction_undefined(self, grid):
        truth = np.zeros((11, 1, 1))
        truth[4, 0, 0] = 1.0
        with pytest.raises(UndefinedMetricError):
            evaluate(np.zeros((11, 1, 1)), truth, grid)

    def test_metrics_row(self):
        row = Metrics(1.0, 2.0, 3.0, 4.0, 'ista').to_row()
        assert row == {'accuracy': 1.0, 'completeness': 2.0, 'outlier_pct': 3.0,
                       'wall_time_seconds': 4.0, 'method': 'ista'}

    def test_invalid_config(self):
        with pytest.raises(InvalidParameterError):
            EvalConfig(threshold_rel=1.5)
        with pytest.raises(InvalidParameterError):
            EvalConfig(nn_method='annoy')
