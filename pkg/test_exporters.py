"""Tests for point-cloud, heatmap and table exporters."""

import numpy as np
import pandas as pd
import pytest

from errors import InvalidParameterError
from evaluation import Metrics, PointCloud
from exporters import (
    HISTORY_COLUMNS,
    append_metrics_csv,
    azimuth_slice,
    read_ply,
    view_projection,
    with_height,
    write_cloud_csv,
    write_heatmap,
    write_history_csv,
    write_ply,
    write_xyz,
)


@pytest.fixture
def sample_cloud():
    return PointCloud(np.array([[0.0, 1.0, -12.5, 0.75], [3.0, 2.0, 40.123456789, 1.25]]))


def test_xyz_lines(tmp_path, sample_cloud):
    lines = write_xyz(sample_cloud, tmp_path / 'cloud.xyz').read_text().splitlines()
    assert lines == ['0 1 -12.5 0.75', '3 2 40.1235 1.25']


def test_xyz_empty_cloud(tmp_path):
    path = write_xyz(PointCloud(np.empty((0, 4))), tmp_path / 'empty.xyz')
    assert path.read_text() == ''


def test_cloud_csv(tmp_path, sample_cloud):
    frame = pd.read_csv(write_cloud_csv(sample_cloud, tmp_path / 'cloud.csv'))
    assert list(frame.columns) == ['x', 'y', 'z', 'amplitude']
    np.testing.assert_allclose(frame.to_numpy(), sample_cloud.points)


def test_ply_round_trip(tmp_path, sample_cloud):
    path = write_ply(sample_cloud, tmp_path / 'cloud.ply')
    assert path.read_bytes().startswith(b'ply\nformat binary_little_endian 1.0')
    np.testing.assert_array_equal(read_ply(path).points, sample_cloud.points)


def test_height_projection(sample_cloud):
    flat = with_height(sample_cloud, incidence_deg=90.0)
    np.testing.assert_allclose(flat.points, sample_cloud.points)
    halved = with_height(sample_cloud, incidence_deg=30.0)
    np.testing.assert_allclose(halved.points[:, 2], sample_cloud.points[:, 2] / 2)


def test_heatmap_is_binary_pgm(tmp_path):
    image = np.zeros((4, 3))
    image[1, 2] = 2.0
    image[3, 0] = 1.0
    pgm, csv = write_heatmap(image, tmp_path / 'front')
    payload = pgm.read_bytes()
    header = b'P5\n3 4\n255\n'
    assert payload.startswith(header)
    gray = np.frombuffer(payload[len(header):], dtype=np.uint8).reshape(4, 3)
    assert gray[1, 2] == 255 and gray[3, 0] == 128 and gray.sum() == 255 + 128
    np.testing.assert_array_equal(pd.read_csv(csv, header=None).to_numpy(), image)


def test_heatmap_of_zeros(tmp_path):
    pgm, _ = write_heatmap(np.zeros((2, 2)), tmp_path / 'blank')
    assert pgm.read_bytes().endswith(b'\0\0\0\0')


def test_slices_and_views():
    volume = np.zeros((5, 3, 2), dtype=complex)
    volume[1, 0, 1] = 3j
    volume[4, 2, 0] = -2.0
    np.testing.assert_array_equal(azimuth_slice(volume, 1)[:, 0], [0, 3, 0, 0, 0])
    assert view_projection(volume, 'front').shape == (5, 3)
    assert view_projection(volume, 'left').shape == (5, 2)
    assert view_projection(volume, 'left')[4, 0] == 2.0
    with pytest.raises(InvalidParameterError):
        azimuth_slice(volume, 2)
    with pytest.raises(InvalidParameterError):
        view_projection(volume, 'top')


def test_history_append(tmp_path):
    path = tmp_path / 'history.csv'
    write_history_csv([{'epoch': 0, 'total': 1.0, 'l1d': 0.5, 'l2d': 0.2, 'lim': 0.1}], path)
    write_history_csv([{'epoch': 1, 'total': 0.5, 'l1d': 0.2, 'l2d': 0.1, 'lim': 0.05}], path, append=True)
    frame = pd.read_csv(path)
    assert list(frame.columns) == HISTORY_COLUMNS
    assert frame['epoch'].tolist() == [0, 1]


def test_metrics_rows_accumulate(tmp_path):
    path = tmp_path / 'metrics.csv'
    append_metrics_csv(Metrics(1.0, 2.0, 10.0, 3.5, 'ista'), path)
    table = append_metrics_csv(Metrics(0.5, 1.0, 0.0, 0.2, 'aetomo'), path)
    assert table['method'].tolist() == ['ista', 'aetomo']
    assert pd.read_csv(path)['outlier_pct'].tolist() == [10.0, 0.0]
