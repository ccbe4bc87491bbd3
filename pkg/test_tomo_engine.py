"""
End-to-end tests of the command-line pipeline on a tiny geometry
(4 baselines, 16 elevation bins, 4 x 3 cells).
"""

import numpy as np
import pandas as pd
import pytest

import config
import file_formats as ff
from network import init_params
from geometry import GeometryConfig
from tomo_engine import main

TINY_GEOMETRY = {'num_baselines': 4, 'elevation_bins': 16, 'baseline_min': -100.0, 'baseline_max': 100.0}
TINY_SCENE = {
    'azimuth_count': 4,
    'range_count': 3,
    'components': [
        {'type': 'point', 'azimuth': 1, 'range': 0, 'elevation': -20.0, 'amplitude': 1.0},
        {'type': 'point', 'azimuth': 2, 'range': 1, 'elevation': 10.0, 'amplitude': 0.8},
        {'type': 'point', 'azimuth': 3, 'range': 2, 'elevation': 30.0, 'amplitude': 0.6},
    ],
}
TINY_NETWORK = {'base_channels': 2, 'pre_blocks': 2, 'final_blocks': 2}
TINY_TRAINING = {'epochs': 2, 'learning_rate': 1e-3, 'holdout_fraction': 0.0, 'checkpoint_interval': 1}


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Empty config directory plus tiny geometry/scene/network/train JSON files."""
    monkeypatch.setenv(config.CONFIG_DIR_ENV, str(tmp_path / 'no-configs'))
    configs = tmp_path / 'configs'
    configs.mkdir()
    for name, document in (('geometry', TINY_GEOMETRY), ('scene', TINY_SCENE),
                           ('network', TINY_NETWORK), ('train', TINY_TRAINING)):
        ff.write_json(configs / f'{name}.json', document)
    return tmp_path


def run(*argv):
    return main(['--no-progress', '--quiet', *map(str, argv)])


def simulate(workspace, out='sim', *extra):
    configs = workspace / 'configs'
    code = run('simulate', '--scene', configs / 'scene.json', '--geometry', configs / 'geometry.json',
               '--out', workspace / out, *extra)
    assert code == 0
    return workspace / out


def train(workspace, sim, out='model', *extra):
    configs = workspace / 'configs'
    code = run('train', sim, '--train', configs / 'train.json', '--network', configs / 'network.json',
               '--out', workspace / out, *extra)
    assert code == 0
    return workspace / out


class TestSimulate:
    def test_archive_contents(self, workspace):
        sim = simulate(workspace, 'sim', '--noise-sigma', 0.05, '--seed', 3)
        volumes = ff.read_archive(sim / 'volumes.atsr')
        assert volumes['truth'].shape == (16, 4, 3) and volumes['truth'].dtype == np.float64
        assert volumes['obs'].shape == (4, 4, 3) and volumes['obs'].dtype == np.complex128
        manifest = ff.read_manifest(sim)
        assert manifest['command'] == 'simulate'
        assert manifest['seeds'] == {'noise': 3}
        assert manifest['geometry']['elevation_bins'] == 16

    def test_rerun_is_byte_identical(self, workspace):
        sim = simulate(workspace, 'sim', '--noise-sigma', 0.1, '--seed', 8)
        assert run('rerun', sim, '--out', workspace / 'again') == 0
        assert (workspace / 'again' / 'volumes.atsr').read_bytes() == (sim / 'volumes.atsr').read_bytes()

    def test_malformed_json(self, workspace, capsys):
        broken = workspace / 'broken.json'
        broken.write_text('{\n  "azimuth_count": 4,,\n}')
        code = run('simulate', '--scene', broken, '--out', workspace / 'sim')
        assert code == 3
        error = capsys.readouterr().err.strip()
        assert error.startswith('error: config:')
        assert 'broken.json:2:' in error

    def test_scatterer_outside_grid(self, workspace, capsys):
        scene = dict(TINY_SCENE, components=[{'type': 'point', 'azimuth': 0, 'range': 0, 'elevation': 80.0}])
        ff.write_json(workspace / 'far.json', scene)
        code = run('simulate', '--scene', workspace / 'far.json',
                   '--geometry', workspace / 'configs' / 'geometry.json', '--out', workspace / 'sim')
        assert code == 4
        assert capsys.readouterr().err.startswith('error: out-of-grid:')

    def test_invalid_thread_count(self, workspace):
        assert main(['--threads', '0', 'simulate', '--out', str(workspace / 'sim')]) == 4


class TestSolve:
    def test_methods_share_shapes(self, workspace):
        sim = simulate(workspace)
        for method in ('ista', 'fista'):
            assert run('solve', sim, '--method', method, '--iters', 200, '--out', workspace / method) == 0
        ista = ff.read_archive(workspace / 'ista' / 'recon.atsr')['recon']
        fista = ff.read_archive(workspace / 'fista' / 'recon.atsr')['recon']
        assert ista.shape == fista.shape == (16, 4, 3)
        manifest = ff.read_manifest(workspace / 'fista')
        assert manifest['method'] == 'fista'
        assert manifest['configs']['solver']['max_iters'] == 200
        assert manifest['timing']['wall_time_seconds'] >= 0

    def test_zero_observations(self, workspace):
        scene = dict(TINY_SCENE, components=[])
        ff.write_json(workspace / 'empty.json', scene)
        code = run('simulate', '--scene', workspace / 'empty.json',
                   '--geometry', workspace / 'configs' / 'geometry.json', '--out', workspace / 'sim')
        assert code == 0
        assert run('solve', workspace / 'sim', '--out', workspace / 'ista') == 0
        assert not np.any(ff.read_archive(workspace / 'ista' / 'recon.atsr')['recon'])

    def test_planted_scatterer_found(self, workspace):
        sim = simulate(workspace)
        assert run('solve', sim, '--method', 'fista', '--lambda', 0.01, '--out', workspace / 'fista') == 0
        recon = ff.read_archive(workspace / 'fista' / 'recon.atsr')['recon']
        truth = ff.read_archive(sim / 'volumes.atsr')['truth']
        assert abs(int(np.argmax(np.abs(recon[:, 1, 0]))) - int(np.argmax(truth[:, 1, 0]))) <= 1

    def test_missing_observations(self, workspace):
        assert run('solve', workspace / 'nowhere', '--out', workspace / 'ista') == 6


class TestTrainAndReconstruct:
    def test_history_and_checkpoints(self, workspace):
        model = train(workspace, simulate(workspace))
        history = pd.read_csv(model / 'history.csv')
        assert history['epoch'].tolist() == [0, 1]
        assert sorted(p.name for p in (model / 'checkpoints').iterdir()) == ['epoch_0001.atsr', 'epoch_0002.atsr']
        manifest = ff.read_manifest(model)
        assert manifest['dims'] == {'M': 4, 'N': 16, 'N_s': 4, 'C0': 2, 'N1': 2, 'N2': 2}
        _, epoch, state = ff.load_checkpoint(model / 'params.atsr')
        assert epoch == 2 and state is not None

    def test_zero_epochs_keeps_initialization(self, workspace):
        model = train(workspace, simulate(workspace), 'model', '--epochs', 0)
        params, epoch, _ = ff.load_checkpoint(model / 'params.atsr')
        R = GeometryConfig.from_dict(TINY_GEOMETRY).measurement_matrix()
        init = init_params(R, c0=2, n1=2, n2=2)
        assert epoch == 0
        for name, tensor in init.named_parameters().items():
            np.testing.assert_array_equal(params.named_parameters()[name].data, tensor.data)

    def test_resume_continues_numbering(self, workspace):
        sim = simulate(workspace)
        model = train(workspace, sim)
        code = run('train', sim, '--train', workspace / 'configs' / 'train.json',
                   '--epochs', 4, '--resume', model / 'params.atsr', '--out', model)
        assert code == 0
        assert pd.read_csv(model / 'history.csv')['epoch'].tolist() == [0, 1, 2, 3]

    def test_reconstruct_threads_bit_identical(self, workspace):
        sim = simulate(workspace, 'sim', '--noise-sigma', 0.05)
        model = train(workspace, sim)
        assert run('reconstruct', sim, '--checkpoint', model / 'params.atsr', '--out', workspace / 'serial') == 0
        assert main(['--no-progress', '--quiet', '--threads', '3', 'reconstruct', str(sim),
                     '--checkpoint', str(model / 'params.atsr'), '--out', str(workspace / 'parallel')]) == 0
        serial = (workspace / 'serial' / 'recon.atsr').read_bytes()
        assert serial == (workspace / 'parallel' / 'recon.atsr').read_bytes()
        assert ff.read_archive(workspace / 'serial' / 'recon.atsr')['recon'].shape == (16, 4, 3)

    def test_pipeline_reruns_byte_identical(self, workspace):
        sim = simulate(workspace, 'sim', '--noise-sigma', 0.05, '--seed', 1)
        model = train(workspace, sim)
        assert run('reconstruct', sim, '--checkpoint', model / 'params.atsr', '--out', workspace / 'recon') == 0

        assert run('rerun', sim, '--out', workspace / 'sim2') == 0
        assert run('rerun', model, '--out', workspace / 'model2') == 0
        assert run('rerun', workspace / 'recon', '--out', workspace / 'recon2') == 0
        for first, second in (('sim/volumes.atsr', 'sim2/volumes.atsr'),
                              ('model/params.atsr', 'model2/params.atsr'),
                              ('recon/recon.atsr', 'recon2/recon.atsr')):
            assert (workspace / first).read_bytes() == (workspace / second).read_bytes(), first


class TestEvaluate:
    def _oracle_dir(self, workspace, sim):
        oracle = workspace / 'oracle'
        oracle.mkdir()
        truth = ff.read_archive(sim / 'volumes.atsr')['truth']
        ff.write_archive(oracle / 'recon.atsr', {'recon': truth.astype(complex)})
        ff.write_manifest(oracle, ff.build_manifest('solve', {}, {}, {}, {}, method='oracle'))
        return oracle

    def test_identical_volumes_give_zero_row(self, workspace):
        sim = simulate(workspace)
        oracle = self._oracle_dir(workspace, sim)
        assert run('evaluate', oracle, sim, '--out', workspace / 'metrics.csv') == 0
        row = pd.read_csv(workspace / 'metrics.csv').iloc[0]
        assert (row['accuracy'], row['completeness'], row['outlier_pct']) == (0.0, 0.0, 0.0)
        assert row['method'] == 'oracle'
        assert (workspace / 'metrics.manifest.json').exists()

    def test_methods_append_rows(self, workspace):
        sim = simulate(workspace)
        oracle = self._oracle_dir(workspace, sim)
        assert run('solve', sim, '--method', 'fista', '--lambda', 0.01, '--out', workspace / 'fista') == 0
        metrics = workspace / 'metrics.csv'
        assert run('evaluate', oracle, sim, '--out', metrics) == 0
        assert run('evaluate', workspace / 'fista', sim, '--out', metrics) == 0
        assert pd.read_csv(metrics)['method'].tolist() == ['oracle', 'fista']

    def test_missing_truth(self, workspace, capsys):
        sim = simulate(workspace)
        oracle = self._oracle_dir(workspace, sim)
        (sim / 'volumes.atsr').unlink()
        assert run('evaluate', oracle, sim, '--out', workspace / 'metrics.csv') == 6
        error = capsys.readouterr().err
        assert error.startswith('error: missing-input:')
        assert 'volumes.atsr' in error


class TestExport:
    def test_truth_point_cloud_xyz(self, workspace):
        sim = simulate(workspace)
        assert run('export', sim, '--format', 'xyz', '--tensor', 'truth', '--out', workspace / 'export') == 0
        lines = (workspace / 'export' / 'truth.xyz').read_text().splitlines()
        assert len(lines) == 3
        assert lines[0].split()[:2] == ['1', '0']

    def test_heatmap(self, workspace):
        sim = simulate(workspace)
        assert run('export', sim / 'volumes.atsr', '--format', 'pgm-heatmap', '--tensor', 'truth',
                   '--range-index', 1, '--out', workspace / 'export') == 0
        payload = (workspace / 'export' / 'truth_range1.pgm').read_bytes()
        assert payload.startswith(b'P5\n4 16\n255\n')
        assert max(payload[len(b'P5\n4 16\n255\n'):]) == 255

    def test_empty_cloud(self, workspace):
        ff.write_json(workspace / 'empty.json', dict(TINY_SCENE, components=[]))
        run('simulate', '--scene', workspace / 'empty.json',
            '--geometry', workspace / 'configs' / 'geometry.json', '--out', workspace / 'sim')
        assert run('solve', workspace / 'sim', '--out', workspace / 'ista') == 0
        assert run('export', workspace / 'ista', '--format', 'xyz', '--out', workspace / 'export') == 0
        assert (workspace / 'export' / 'recon.xyz').read_text() == ''

    def test_ply_round_trip_through_cli(self, workspace):
        sim = simulate(workspace)
        assert run('export', sim, '--format', 'ply', '--tensor', 'truth', '--out', workspace / 'ply') == 0
        assert run('export', workspace / 'ply' / 'truth.ply', '--format', 'csv', '--out', workspace / 'csv') == 0
        assert len(pd.read_csv(workspace / 'csv' / 'truth.csv')) == 3
