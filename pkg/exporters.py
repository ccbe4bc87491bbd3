"""
Result Exporters

Writes point clouds (ASCII XYZ, CSV, binary PLY), magnitude heatmaps
(binary PGM plus CSV) and tabular results (training history, metrics).
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Union

import numpy as np
import pandas as pd
from PIL import Image
from plyfile import PlyData, PlyElement

import config
from errors import InvalidParameterError, MissingInputError, ShapeError
from evaluation import Metrics, PointCloud
from geometry import elevation_to_height

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
VIEWS = ('front', 'left')
CLOUD_COLUMNS = ['x', 'y', 'z', 'amplitude']
HISTORY_COLUMNS = ['epoch', 'total', 'l1d', 'l2d', 'lim']


def with_height(cloud: PointCloud, incidence_deg: float = config.INCIDENCE_DEG) -> PointCloud:
    """Replace the elevation coordinate by height above the reference plane."""
    points = cloud.points.copy()
    points[:, 2] = elevation_to_height(points[:, 2], incidence_deg)
    return PointCloud(points)


def write_xyz(cloud: PointCloud, path: PathLike) -> Path:
    """One "x y z amplitude" line per point; an empty cloud gives an empty file."""
    path = Path(path)
    digits = config.XYZ_SIGNIFICANT_DIGITS
    with open(path, 'w') as f:
        for x, y, z, amplitude in cloud.points:
            f.write(f"{x:.{digits}g} {y:.{digits}g} {z:.{digits}g} {amplitude:.{digits}g}\n")
    return path


def write_cloud_csv(cloud: PointCloud, path: PathLike) -> Path:
    path = Path(path)
    pd.DataFrame(cloud.points, columns=CLOUD_COLUMNS).to_csv(path, index=False)
    return path


def write_ply(cloud: PointCloud, path: PathLike) -> Path:
    """Binary little-endian PLY with x, y, z and amplitude vertex properties."""
    path = Path(path)
    vertices = np.empty(len(cloud), dtype=[(name, '<f8') for name in CLOUD_COLUMNS])
    for column, name in enumerate(CLOUD_COLUMNS):
        vertices[name] = cloud.points[:, column]
    PlyData([PlyElement.describe(vertices, 'vertex')], text=False, byte_order='<').write(str(path))
    return path


def read_ply(path: PathLike) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path}: no such file")
    vertex = PlyData.read(str(path))['vertex']
    return PointCloud(np.stack([vertex[name] for name in CLOUD_COLUMNS], axis=-1))


def azimuth_slice(volume: np.ndarray, range_index: int) -> np.ndarray:
    """Magnitude of one azimuth-elevation slice (elevation x azimuth)."""
    if not 0 <= range_index < volume.shape[2]:
        raise InvalidParameterError(f"range index {range_index} outside 0..{volume.shape[2] - 1}")
    return np.abs(volume[:, :, range_index])


def view_projection(volume: np.ndarray, view: str) -> np.ndarray:
    """
    Maximum-magnitude projection of an N x A x D volume.

    Args:
        volume: Reconstructed or ground-truth volume
        view: 'front' (along range, elevation x azimuth) or
              'left' (along azimuth, elevation x range)
    """
    if volume.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got shape {volume.shape}")
    if view not in VIEWS:
        raise InvalidParameterError(f"unknown view {view!r}; expected one of {VIEWS}")
    axis = 2 if view == 'front' else 1
    return np.abs(volume).max(axis=axis)


def write_heatmap(image: np.ndarray, stem: PathLike) -> List[Path]:
    """
    Write a magnitude image as <stem>.pgm (P5, 8-bit, scaled by its maximum)
    and <stem>.csv (raw values). Row 0 is the lowest elevation bin.
    """
    stem = Path(stem)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"heatmap must be 2D, got shape {image.shape}")
    peak = image.max(initial=0.0)
    gray = np.zeros(image.shape, dtype=np.uint8)
    if peak > 0:
        gray = np.rint(255.0 * image / peak).astype(np.uint8)

    pgm_path = stem.with_suffix('.pgm')
    csv_path = stem.with_suffix('.csv')
    Image.fromarray(gray).save(pgm_path, format='PPM')
    pd.DataFrame(image).to_csv(csv_path, index=False, header=False)
    logger.debug("Heatmap %s (%d x %d, max %.4g)", stem, image.shape[0], image.shape[1], peak)
    return [pgm_path, csv_path]


def write_history_csv(history: Iterable[Dict], path: PathLike, append: bool = False) -> Path:
    """One row per epoch: epoch,total,l1d,l2d,lim."""
    path = Path(path)
    frame = pd.DataFrame(list(history), columns=HISTORY_COLUMNS)
    if append and path.exists():
        frame = pd.concat([pd.read_csv(path), frame], ignore_index=True)
    frame.to_csv(path, index=False)
    return path


def append_metrics_csv(metrics: Metrics, path: PathLike) -> pd.DataFrame:
    """Append one method's row to the comparison table and return the whole table."""
    path = Path(path)
    row = pd.DataFrame([metrics.to_row()])
    table = pd.concat([pd.read_csv(path), row], ignore_index=True) if path.exists() else row
    table.to_csv(path, index=False)
    return table
