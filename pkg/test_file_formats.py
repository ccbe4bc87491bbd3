"""Tests for the ATSR tensor archive, JSON configs, manifests and checkpoints."""

import struct

import numpy as np
import pytest

import config
from errors import ArchiveError, ConfigError, MissingInputError
from file_formats import (
    build_manifest,
    config_dir,
    decode_archive,
    encode_archive,
    load_checkpoint,
    load_json,
    load_section,
    read_archive,
    read_manifest,
    resolve_config,
    save_checkpoint,
    write_archive,
    write_json,
    write_manifest,
)
from network import init_params
from training import TrainConfig, make_optimizer


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return {
        'truth': rng.uniform(0, 1, (16, 3, 2)),
        'obs': rng.standard_normal((4, 3, 2)) + 1j * rng.standard_normal((4, 3, 2)),
        'scalar': np.array(2.5),
        'empty': np.zeros((0, 4)),
    }


class TestArchive:
    def test_round_trip(self, tmp_path, tensors):
        path = write_archive(tmp_path / 'volumes.atsr', tensors)
        loaded = read_archive(path)
        assert list(loaded) == list(tensors)
        for name, array in tensors.items():
            assert loaded[name].dtype == (np.complex128 if np.iscomplexobj(array) else np.float64)
            assert loaded[name].shape == array.shape
            np.testing.assert_array_equal(loaded[name], array)

    def test_header_layout(self):
        payload = encode_archive({'x': np.array([1.0, 2.0])})
        assert payload[:4] == b'ATSR'
        assert struct.unpack('<II', payload[4:12]) == (config.ARCHIVE_VERSION, 1)
        assert struct.unpack('<I', payload[12:16]) == (1,)
        assert payload[16:17] == b'x'
        assert struct.unpack('<BI', payload[17:22]) == (0, 1)
        assert struct.unpack('<Q', payload[22:30]) == (2,)
        assert struct.unpack('<2d', payload[30:]) == (1.0, 2.0)

    def test_rank_zero_keeps_shape(self):
        payload = encode_archive({'s': np.array(2.5)})
        assert struct.unpack('<BI', payload[17:22]) == (0, 0)
        assert struct.unpack('<d', payload[22:]) == (2.5,)
        decoded = decode_archive(payload)['s']
        assert decoded.shape == () and decoded.item() == 2.5

    def test_complex_is_interleaved(self):
        payload = encode_archive({'z': np.array([1.0 + 2.0j])})
        assert struct.unpack('<2d', payload[-16:]) == (1.0, 2.0)

    def test_integers_stored_as_real(self):
        assert decode_archive(encode_archive({'i': np.arange(3)}))['i'].dtype == np.float64

    def test_encoding_is_deterministic(self, tensors):
        assert encode_archive(tensors) == encode_archive(dict(tensors))

    def test_bad_magic(self, tensors):
        payload = bytearray(encode_archive(tensors))
        payload[:4] = b'NOPE'
        with pytest.raises(ArchiveError, match="magic"):
            decode_archive(bytes(payload))

    def test_unsupported_version(self, tensors):
        payload = bytearray(encode_archive(tensors))
        payload[4:8] = struct.pack('<I', 99)
        with pytest.raises(ArchiveError, match="version"):
            decode_archive(bytes(payload))

    def test_truncated(self, tensors):
        payload = encode_archive(tensors)
        with pytest.raises(ArchiveError, match="truncated"):
            decode_archive(payload[:-3])

    def test_trailing_bytes(self, tensors):
        with pytest.raises(ArchiveError, match="trailing"):
            decode_archive(encode_archive(tensors) + b'\0')

    def test_unknown_dtype_code(self):
        payload = bytearray(encode_archive({'x': np.zeros(1)}))
        payload[17] = 7
        with pytest.raises(ArchiveError, match="dtype"):
            decode_archive(bytes(payload))

    def test_duplicate_names(self):
        single = encode_archive({'x': np.zeros(1)})
        entry = single[12:]
        payload = single[:8] + struct.pack('<I', 2) + entry + entry
        with pytest.raises(ArchiveError, match="duplicate"):
            decode_archive(payload)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInputError):
            read_archive(tmp_path / 'absent.atsr')


class TestJson:
    def test_syntax_error_reports_position(self, tmp_path):
        path = tmp_path / 'scene.json'
        path.write_text('{\n  "azimuth_count": 10,\n  "range_count": ,\n}\n')
        with pytest.raises(ConfigError, match=r"scene\.json:3:\d+:"):
            load_json(path)

    def test_top_level_must_be_object(self, tmp_path):
        path = tmp_path / 'list.json'
        path.write_text('[1, 2]')
        with pytest.raises(ConfigError):
            load_json(path)

    def test_written_sorted(self, tmp_path):
        path = write_json(tmp_path / 'doc.json', {'b': 1, 'a': 2})
        assert path.read_text().index('"a"') < path.read_text().index('"b"')
        assert load_json(path) == {'a': 2, 'b': 1}


class TestConfigDirectory:
    def test_environment_variable(self, tmp_path, monkeypatch):
        monkeypatch.setenv(config.CONFIG_DIR_ENV, str(tmp_path))
        assert config_dir() == tmp_path

    def test_section_from_config_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(config.CONFIG_DIR_ENV, str(tmp_path))
        write_json(tmp_path / 'solver.json', {'max_iters': 7})
        assert load_section(None, 'solver.json') == {'max_iters': 7}
        assert load_section(None, 'train.json') == {}

    def test_explicit_path_must_exist(self, tmp_path):
        with pytest.raises(MissingInputError):
            resolve_config(tmp_path / 'nope.json', 'geometry.json')


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = build_manifest('simulate', {'scene': 'a.json'}, {'geometry': {'num_baselines': 4}},
                                  {'noise': 3}, {'volumes': 'volumes.atsr'}, timing={'seconds': 0.1})
        write_manifest(tmp_path, manifest)
        loaded = read_manifest(tmp_path)
        assert loaded == manifest
        assert loaded['toolkit_version'] == config.TOOLKIT_VERSION

    def test_incomplete_manifest(self, tmp_path):
        write_json(tmp_path / 'manifest.json', {'command': 'solve'})
        with pytest.raises(ConfigError, match="configs"):
            read_manifest(tmp_path / 'manifest.json')


class TestCheckpoint:
    def test_round_trip_with_optimizer_state(self, tmp_path, tiny_matrix):
        params = init_params(tiny_matrix, c0=2, n1=2, n2=3, seed=4, theta_init=0.02)
        optimizer = make_optimizer(params, TrainConfig())
        for tensor in params.named_parameters().values():
            tensor.grad = np.ones_like(tensor.data)
        optimizer.step()

        path = save_checkpoint(tmp_path / 'params.atsr', params, 7, optimizer.state_dict())
        loaded, epoch, state = load_checkpoint(path)
        assert epoch == 7
        assert loaded.network == params.network
        assert (loaded.n_baselines, loaded.n_bins) == (4, 16)
        for name, tensor in params.named_parameters().items():
            np.testing.assert_array_equal(loaded.named_parameters()[name].data, tensor.data)
        assert set(state) == set(optimizer.state_dict())
        assert state['step'].shape == ()
        make_optimizer(loaded, TrainConfig()).load_state_dict(state)

    def test_lista_variant(self, tmp_path, tiny_matrix):
        params = init_params(tiny_matrix, n1=3, variant='lista')
        loaded, epoch, state = load_checkpoint(save_checkpoint(tmp_path / 'p.atsr', params, 0))
        assert loaded.variant == 'lista' and loaded.fin is None
        assert epoch == 0 and state is None

    def test_missing_parameter(self, tmp_path, tiny_params):
        save_checkpoint(tmp_path / 'p.atsr', tiny_params, 1)
        tensors = read_archive(tmp_path / 'p.atsr')
        del tensors['param.head.bias']
        write_archive(tmp_path / 'p.atsr', tensors)
        with pytest.raises(ArchiveError, match="head.bias"):
            load_checkpoint(tmp_path / 'p.atsr')

    def test_missing_metadata(self, tmp_path):
        write_archive(tmp_path / 'p.atsr', {'param.pre.00.W1': np.zeros((16, 4), dtype=complex)})
        with pytest.raises(ArchiveError, match="metadata"):
            load_checkpoint(tmp_path / 'p.atsr')
