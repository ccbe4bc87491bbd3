"""
Toolkit File Formats

ATSR tensor archive (little-endian, fixed layout):

    magic     4 bytes  b'ATSR'
    version   <I
    count     <I
    per entry:
        name length <I, name (UTF-8)
        dtype code  <B   (0 = real64, 1 = complex128)
        rank        <I
        dims        <Q * rank
        values      <f8 or <c16 (complex as interleaved re, im)

Plus JSON config loading with positioned diagnostics and run manifests.
"""

import io
import json
import logging
import os
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from dotenv import load_dotenv

import config
from errors import ArchiveError, ConfigError, MissingInputError
from network import NETWORK_VARIANTS, NetworkConfig, NetworkParams, empty_params

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
DTYPE_CODES = {0: np.dtype('<f8'), 1: np.dtype('<c16')}
MANIFEST_NAME = 'manifest.json'


def _dtype_code(array: np.ndarray) -> int:
    if np.iscomplexobj(array):
        return 1
    if array.dtype.kind in 'biuf':
        return 0
    raise ArchiveError(f"unsupported dtype {array.dtype}")


def encode_archive(tensors: Dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays in insertion order."""
    buffer = io.BytesIO()
    buffer.write(config.ARCHIVE_MAGIC)
    buffer.write(struct.pack('<II', config.ARCHIVE_VERSION, len(tensors)))
    for name, array in tensors.items():
        array = np.asarray(array)
        code = _dtype_code(array)
        # copy keeps rank 0; ascontiguousarray would promote scalars to 1-d
        data = np.asarray(array, dtype=DTYPE_CODES[code]).copy(order='C')
        encoded = name.encode('utf-8')
        buffer.write(struct.pack('<I', len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack('<BI', code, data.ndim))
        buffer.write(struct.pack(f'<{data.ndim}Q', *data.shape))
        buffer.write(data.tobytes())
    return buffer.getvalue()


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise ArchiveError(
                f"{self.source}: truncated {what} at byte {self.offset} "
                f"(need {size}, have {len(self.payload) - self.offset})"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_archive(payload: bytes, source: str = '<bytes>') -> Dict[str, np.ndarray]:
    """
    Parse an archive.

    Raises:
        ArchiveError: bad magic, unsupported version, unknown dtype code,
            duplicate names, size mismatch or trailing bytes
    """
    reader = _Reader(payload, source)
    magic = reader.take(4, 'magic')
    if magic != config.ARCHIVE_MAGIC:
        raise ArchiveError(f"{source}: bad magic {magic!r}")
    version, count = reader.unpack('<II', 'header')
    if version != config.ARCHIVE_VERSION:
        raise ArchiveError(f"{source}: unsupported version {version}")

    tensors = {}
    for _ in range(count):
        (length,) = reader.unpack('<I', 'name length')
        try:
            name = reader.take(length, 'name').decode('utf-8')
        except UnicodeDecodeError as exc:
            raise ArchiveError(f"{source}: entry name is not UTF-8") from exc
        if name in tensors:
            raise ArchiveError(f"{source}: duplicate entry {name!r}")
        code, rank = reader.unpack('<BI', f'header of {name!r}')
        if code not in DTYPE_CODES:
            raise ArchiveError(f"{source}: entry {name!r} has unknown dtype code {code}")
        shape = reader.unpack(f'<{rank}Q', f'dims of {name!r}')
        dtype = DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.uint64)) * dtype.itemsize
        values = reader.take(size, f'values of {name!r}')
        tensors[name] = np.frombuffer(values, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
    if reader.offset != len(payload):
        raise ArchiveError(f"{source}: {len(payload) - reader.offset} trailing bytes")
    return tensors


def write_archive(path: PathLike, tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(encode_archive(tensors))
    logger.debug("Wrote %s (%d tensors)", path, len(tensors))
    return path


def read_archive(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path}: no such file")
    return decode_archive(path.read_bytes(), str(path))


def load_json(path: PathLike) -> Dict:
    """Read a JSON object; syntax errors report path:line:column."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path}: no such file")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return document


def write_json(path: PathLike, document: Dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + '\n')
    return path


def config_dir() -> Path:
    """Default config directory: $TOMO_CONFIG_DIR (also read from .env) or ./configs."""
    load_dotenv()
    return Path(os.environ.get(config.CONFIG_DIR_ENV, config.DEFAULT_CONFIG_DIR))


def resolve_config(explicit: Optional[PathLike], name: str) -> Optional[Path]:
    """
    The explicit path if given, else <config dir>/<name> when it exists,
    else None (meaning built-in defaults).
    """
    if explicit is not None:
        path = Path(explicit)
        if not path.exists():
            raise MissingInputError(f"{path}: no such file")
        return path
    candidate = config_dir() / name
    return candidate if candidate.exists() else None


def load_section(explicit: Optional[PathLike], name: str) -> Dict:
    path = resolve_config(explicit, name)
    return load_json(path) if path is not None else {}


def build_manifest(command: str, inputs: Dict, configs: Dict, seeds: Dict, outputs: Dict, **extra) -> Dict:
    """
    Record what a command needs to be re-run: its name, resolved configs,
    input paths, seeds and output files. Extra keys (geometry, timing) are
    stored alongside.
    """
    manifest = {
        'command': command,
        'toolkit_version': config.TOOLKIT_VERSION,
        'created': datetime.now(timezone.utc).isoformat(timespec='seconds'),
        'inputs': inputs,
        'configs': configs,
        'seeds': seeds,
        'outputs': outputs,
    }
    manifest.update(extra)
    return manifest


def write_manifest(out_dir: PathLike, manifest: Dict) -> Path:
    return write_json(Path(out_dir) / MANIFEST_NAME, manifest)


def read_manifest(path: PathLike) -> Dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = load_json(path)
    for key in ('command', 'configs', 'inputs'):
        if key not in manifest:
            raise ConfigError(f"{path}: manifest lacks {key!r}")
    return manifest


# ---------------------------------------------------------------------------
# Network checkpoints: 'param.<name>' tensors, 'optim.<key>' optimizer state
# and 'meta.<key>' scalars describing the architecture
# ---------------------------------------------------------------------------

META_KEYS = ('base_channels', 'pre_blocks', 'final_blocks', 'seed', 'theta_init')


def checkpoint_tensors(params: NetworkParams, epoch: int, optimizer_state: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    network = params.network
    tensors = {
        'meta.version': np.array(float(config.ARCHIVE_VERSION)),
        'meta.epoch': np.array(float(epoch)),
        'meta.variant': np.array(float(NETWORK_VARIANTS.index(network.variant))),
        'meta.n_baselines': np.array(float(params.n_baselines)),
        'meta.n_bins': np.array(float(params.n_bins)),
    }
    for key in META_KEYS:
        tensors[f'meta.{key}'] = np.array(float(getattr(network, key)))
    for name, tensor in params.named_parameters().items():
        tensors[f'param.{name}'] = tensor.data
    for key, value in (optimizer_state or {}).items():
        tensors[f'optim.{key}'] = value
    return tensors


def save_checkpoint(path: PathLike, params: NetworkParams, epoch: int,
                    optimizer_state: Optional[Dict[str, np.ndarray]] = None) -> Path:
    return write_archive(path, checkpoint_tensors(params, epoch, optimizer_state))


def load_checkpoint(path: PathLike):
    """
    Rebuild network parameters from a checkpoint archive.

    Returns:
        (params, epoch, optimizer_state or None)

    Raises:
        ArchiveError: missing metadata, missing or misshapen parameters
    """
    tensors = read_archive(path)
    try:
        meta = {key[len('meta.'):]: float(value) for key, value in tensors.items() if key.startswith('meta.')}
        network = NetworkConfig(
            variant=NETWORK_VARIANTS[int(meta['variant'])],
            base_channels=int(meta['base_channels']),
            pre_blocks=int(meta['pre_blocks']),
            final_blocks=int(meta['final_blocks']),
            theta_init=meta['theta_init'],
            seed=int(meta['seed']),
        )
        params = empty_params(network, int(meta['n_baselines']), int(meta['n_bins']))
        epoch = int(meta['epoch'])
    except (KeyError, IndexError) as exc:
        raise ArchiveError(f"{path}: checkpoint metadata incomplete ({exc})") from exc

    for name, tensor in params.named_parameters().items():
        stored = tensors.get(f'param.{name}')
        if stored is None:
            raise ArchiveError(f"{path}: checkpoint lacks parameter {name!r}")
        if stored.shape != tensor.shape:
            raise ArchiveError(f"{path}: parameter {name!r} has shape {stored.shape}, expected {tensor.shape}")
        tensor.data[...] = stored

    optimizer_state = {key[len('optim.'):]: value for key, value in tensors.items() if key.startswith('optim.')}
    return params, epoch, optimizer_state or None
