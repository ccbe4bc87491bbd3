"""
Point-Cloud Evaluation

Extracts scatterer point clouds from reconstructed and ground-truth volumes
and scores a reconstruction by accuracy (reconstruction -> truth),
completeness (truth -> reconstruction) and outlier percentage.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Dict, Optional

import numpy as np
from scipy.spatial import cKDTree as KDTree

import config
from errors import ConfigError, InvalidParameterError, ShapeError, UndefinedMetricError
from geometry import ElevationGrid

logger = logging.getLogger(__name__)

NN_METHODS = ('brute', 'kdtree')
BRUTE_CHUNK = 512  # query rows per all-pairs block
TIE_SLACK = 1e-9    # relative ball margin for k-d tree candidates


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points as rows (x azimuth m, y range m, z elevation m, amplitude)."""

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(points)):
            raise InvalidParameterError("point cloud has non-finite entries")
        if np.any(points[:, 3] <= 0):
            raise InvalidParameterError("point amplitudes must be > 0")
        object.__setattr__(self, 'points', points)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def amplitudes(self) -> np.ndarray:
        return self.points[:, 3]

    def translated(self, offset) -> 'PointCloud':
        shifted = self.points.copy()
        shifted[:, :3] += np.asarray(offset, dtype=np.float64)
        return PointCloud(shifted)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    completeness: float
    outlier_pct: float
    wall_time_seconds: float = 0.0
    method: str = ''

    def to_row(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    """
    Evaluation JSON document.

    inlier_tau and tau default to tau_bins elevation bin spacings when None.
    """

    threshold_rel: float = config.THRESHOLD_REL
    tau_bins: float = config.TAU_BINS
    inlier_tau: Optional[float] = None
    tau: Optional[float] = None
    nn_method: str = config.NN_METHOD
    azimuth_spacing: float = config.AZIMUTH_SPACING
    range_spacing: float = config.RANGE_SPACING

    def __post_init__(self):
        if not 0.0 < self.threshold_rel < 1.0:
            raise InvalidParameterError(f"threshold_rel must be in (0, 1), got {self.threshold_rel}")
        if self.nn_method not in NN_METHODS:
            raise InvalidParameterError(f"unknown nn_method {self.nn_method!r}; expected one of {NN_METHODS}")
        for name in ('tau_bins', 'inlier_tau', 'tau', 'azimuth_spacing', 'range_spacing'):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise InvalidParameterError(f"{name} must be > 0, got {value}")

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvalConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown evaluation keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)

    def cutoffs(self, grid: ElevationGrid):
        default = self.tau_bins * grid.spacing
        return (self.inlier_tau if self.inlier_tau is not None else default,
                self.tau if self.tau is not None else default)


def _cloud_from_indices(magnitude: np.ndarray, mask: np.ndarray, grid: ElevationGrid,
                        azimuth_spacing: float, range_spacing: float) -> PointCloud:
    # (azimuth, range, elevation) ordering of the rows
    azimuth, range_index, bins = np.nonzero(np.transpose(mask, (1, 2, 0)))
    points = np.column_stack([
        azimuth * azimuth_spacing,
        range_index * range_spacing,
        grid.centers[bins],
        magnitude[bins, azimuth, range_index],
    ])
    return PointCloud(points)


def _check_volume(volume: np.ndarray, grid: ElevationGrid):
    if volume.ndim != 3 or volume.shape[0] != grid.n_bins:
        raise ShapeError(f"volume shape {volume.shape} does not match {grid.n_bins} elevation bins")


def extract_point_cloud(
    volume: np.ndarray,
    grid: ElevationGrid,
    threshold_rel: float = config.THRESHOLD_REL,
    azimuth_spacing: float = config.AZIMUTH_SPACING,
    range_spacing: float = config.RANGE_SPACING,
) -> PointCloud:
    """
    Keep local maxima of |volume| along elevation whose magnitude reaches
    threshold_rel times the global maximum.

    A bin is a local maximum when it is strictly above its lower neighbour
    and not below its upper one, so a flat-topped lobe yields one point.
    """
    _check_volume(volume, grid)
    if not 0.0 < threshold_rel < 1.0:
        raise InvalidParameterError(f"threshold_rel must be in (0, 1), got {threshold_rel}")
    magnitude = np.abs(volume)
    peak = magnitude.max(initial=0.0)
    if peak == 0:
        return PointCloud(np.empty((0, 4)))

    padded = np.pad(magnitude, ((1, 1), (0, 0), (0, 0)), constant_values=-1.0)
    is_max = (magnitude > padded[:-2]) & (magnitude >= padded[2:])
    mask = is_max & (magnitude >= threshold_rel * peak)
    cloud = _cloud_from_indices(magnitude, mask, grid, azimuth_spacing, range_spacing)
    logger.debug("Extracted %d points (threshold %.3g)", len(cloud), threshold_rel * peak)
    return cloud


def truth_point_cloud(
    volume: np.ndarray,
    grid: ElevationGrid,
    azimuth_spacing: float = config.AZIMUTH_SPACING,
    range_spacing: float = config.RANGE_SPACING,
) -> PointCloud:
    """Every nonzero cell of a ground-truth volume becomes a point."""
    _check_volume(volume, grid)
    magnitude = np.abs(volume)
    return _cloud_from_indices(magnitude, magnitude > 0, grid, azimuth_spacing, range_spacing)


def _pair_distances(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    return np.sqrt(((queries - refs) ** 2).sum(axis=-1))


def nearest_distances(queries: np.ndarray, refs: np.ndarray, method: str = config.NN_METHOD) -> np.ndarray:
    """
    Distance from every query point to its nearest reference point.

    'brute' scans all pairs. 'kdtree' finds the nearest distance with a k-d
    tree, then re-measures every reference inside a slightly larger ball
    with the brute formula, so ties and rounding resolve identically.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 3)
    if method not in NN_METHODS:
        raise InvalidParameterError(f"unknown nn method {method!r}")
    if not len(refs):
        raise UndefinedMetricError("no reference points to measure against")
    if not len(queries):
        return np.empty(0)
    if method == 'kdtree':
        tree = KDTree(refs)
        nearest, _ = tree.query(queries)
        balls = tree.query_ball_point(queries, nearest * (1.0 + TIE_SLACK) + TIE_SLACK)
        return np.array([_pair_distances(query, refs[candidates]).min()
                         for query, candidates in zip(queries, balls)], dtype=np.float64)

    distances = np.empty(len(queries))
    for start in range(0, len(queries), BRUTE_CHUNK):
        block = queries[start:start + BRUTE_CHUNK]
        distances[start:start + BRUTE_CHUNK] = _pair_distances(block[:, None, :], refs[None, :, :]).min(axis=1)
    return distances


def accuracy(recon: PointCloud, truth: PointCloud, inlier_tau: float,
             method: str = config.NN_METHOD) -> float:
    """
    Mean distance from reconstructed points to their nearest truth point,
    over the reconstructed points within inlier_tau. NaN when no point is
    within inlier_tau (every point is then an outlier).
    """
    if not len(recon):
        raise UndefinedMetricError("accuracy undefined: reconstructed cloud is empty")
    if not len(truth):
        raise UndefinedMetricError("accuracy undefined: truth cloud is empty")
    distances = nearest_distances(recon.xyz, truth.xyz, method)
    inliers = distances[distances <= inlier_tau]
    if not len(inliers):
        logger.warning("No reconstructed point within %g m of the truth; accuracy is NaN", inlier_tau)
        return float('nan')
    return float(inliers.mean())


def completeness(recon: PointCloud, truth: PointCloud, method: str = config.NN_METHOD) -> float:
    """Mean distance from truth points to their nearest reconstructed point."""
    if not len(truth):
        raise UndefinedMetricError("completeness undefined: truth cloud is empty")
    if not len(recon):
        raise UndefinedMetricError("completeness undefined: reconstructed cloud is empty")
    return float(nearest_distances(truth.xyz, recon.xyz, method).mean())


def outlier_pct(recon: PointCloud, truth: PointCloud, tau: float, method: str = config.NN_METHOD) -> float:
    """Percentage of reconstructed points farther than tau from every truth point."""
    if not len(recon):
        raise UndefinedMetricError("outlier percentage undefined: reconstructed cloud is empty")
    if not len(truth):
        raise UndefinedMetricError("outlier percentage undefined: truth cloud is empty")
    distances = nearest_distances(recon.xyz, truth.xyz, method)
    return float(100.0 * np.count_nonzero(distances > tau) / len(distances))


def evaluate(
    recon_volume: np.ndarray,
    truth_volume: np.ndarray,
    grid: ElevationGrid,
    cfg: EvalConfig = EvalConfig(),
    wall_time_seconds: float = 0.0,
    method: str = '',
) -> Metrics:
    """
    Score a reconstructed volume against the ground truth.

    Args:
        recon_volume: Complex N x A x D reconstruction
        truth_volume: Real N x A x D reflectivity (every nonzero is a point)
        grid: Elevation grid of both volumes
        cfg: Extraction threshold, cutoffs and nearest-neighbour backend
        wall_time_seconds: Reconstruction time measured by the caller
        method: Label stored with the metrics

    Returns:
        Metrics record
    """
    if recon_volume.shape != truth_volume.shape:
        raise ShapeError(f"volumes differ: {recon_volume.shape} vs {truth_volume.shape}")
    inlier_tau, tau = cfg.cutoffs(grid)
    recon = extract_point_cloud(recon_volume, grid, cfg.threshold_rel, cfg.azimuth_spacing, cfg.range_spacing)
    truth = truth_point_cloud(truth_volume, grid, cfg.azimuth_spacing, cfg.range_spacing)
    metrics = Metrics(
        accuracy=accuracy(recon, truth, inlier_tau, cfg.nn_method),
        completeness=completeness(recon, truth, cfg.nn_method),
        outlier_pct=outlier_pct(recon, truth, tau, cfg.nn_method),
        wall_time_seconds=float(wall_time_seconds),
        method=method,
    )
    logger.info("%s: accuracy %.4g m, completeness %.4g m, outliers %.2f%% (%d recon / %d truth points)",
                method or 'recon', metrics.accuracy, metrics.completeness, metrics.outlier_pct,
                len(recon), len(truth))
    return metrics
