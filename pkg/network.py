"""
AETomo-Net Forward Model

Four stages over one azimuth-elevation slice:
    pre-imaging (LISTA, N1 blocks, per azimuth column)
    -> 2D feature extraction (3 conv blocks + bottleneck)
    -> 2D feature fusion (3 up-blocks with skip connections + 1x1 head)
    -> final imaging (LISTA, N2 blocks, seeded with the fused estimate)

The 'lista' variant keeps only the pre-imaging stack and serves as the
1D deep-unfolding baseline.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

import config
import diffengine as de
from diffengine import Tensor
from errors import ConfigError, InvalidParameterError, ShapeError
from geometry import MeasurementMatrix

logger = logging.getLogger(__name__)

NETWORK_VARIANTS = ('aetomo', 'lista')
ENCODER_DEPTH = 3


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture JSON section; every key defaults to config.py."""

    variant: str = config.NETWORK_VARIANT
    base_channels: int = config.BASE_CHANNELS
    pre_blocks: int = config.PRE_BLOCKS
    final_blocks: int = config.FINAL_BLOCKS
    theta_init: float = config.THETA_INIT
    seed: int = config.NETWORK_SEED

    def __post_init__(self):
        if self.variant not in NETWORK_VARIANTS:
            raise InvalidParameterError(f"unknown variant {self.variant!r}; expected one of {NETWORK_VARIANTS}")
        if self.base_channels < 1:
            raise InvalidParameterError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.pre_blocks < 1 or self.final_blocks < 0:
            raise InvalidParameterError("need at least one pre-imaging block")
        if self.theta_init < 0:
            raise InvalidParameterError(f"theta_init must be >= 0, got {self.theta_init}")

    @classmethod
    def from_dict(cls, data: Dict) -> 'NetworkConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SliceObservation:
    """Observations of one azimuth-elevation slice, shape M x N_s."""

    g_slice: np.ndarray

    @property
    def width(self) -> int:
        return self.g_slice.shape[1]


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor


@dataclass
class LISTAStackParams:
    """Untied LISTA blocks, each {'W1': N x M, 'W2': N x N, 'theta': scalar}."""

    blocks: List[Dict[str, Tensor]]

    @property
    def count(self) -> int:
        return len(self.blocks)


@dataclass
class EncoderParams:
    blocks: List[Tuple[ConvLayer, ConvLayer]]
    bottleneck: Tuple[ConvLayer, ConvLayer]


@dataclass
class DecoderParams:
    """Up-blocks from deepest to shallowest: {'up': kernels, 'conv1', 'conv2'}."""

    blocks: List[Dict]
    head: ConvLayer


@dataclass
class NetworkParams:
    """All learnable weights of one network plus the dimensions they were built for."""

    pre: LISTAStackParams
    enc: Optional[EncoderParams]
    dec: Optional[DecoderParams]
    fin: Optional[LISTAStackParams]
    n_baselines: int
    n_bins: int
    network: NetworkConfig = field(default_factory=NetworkConfig)

    @property
    def variant(self) -> str:
        return self.network.variant

    def named_parameters(self) -> Dict[str, Tensor]:
        """Every trainable tensor under a stable, unique name."""
        named = {}
        for prefix, stack in (('pre', self.pre), ('fin', self.fin)):
            if stack is None:
                continue
            for index, block in enumerate(stack.blocks):
                for key in ('W1', 'W2', 'theta'):
                    named[f"{prefix}.{index:02d}.{key}"] = block[key]
        if self.enc is not None:
            for index, layers in enumerate(self.enc.blocks):
                for position, layer in enumerate(layers, start=1):
                    named[f"enc.{index}.conv{position}.weight"] = layer.weight
                    named[f"enc.{index}.conv{position}.bias"] = layer.bias
            for position, layer in enumerate(self.enc.bottleneck, start=1):
                named[f"bottleneck.conv{position}.weight"] = layer.weight
                named[f"bottleneck.conv{position}.bias"] = layer.bias
        if self.dec is not None:
            for index, block in enumerate(self.dec.blocks):
                named[f"dec.{index}.up.weight"] = block['up']
                for position in (1, 2):
                    named[f"dec.{index}.conv{position}.weight"] = block[f'conv{position}'].weight
                    named[f"dec.{index}.conv{position}.bias"] = block[f'conv{position}'].bias
            named["head.weight"] = self.dec.head.weight
            named["head.bias"] = self.dec.head.bias
        return named

    def threshold_parameters(self) -> List[Tensor]:
        stacks = [self.pre] + ([self.fin] if self.fin is not None else [])
        return [block['theta'] for stack in stacks for block in stack.blocks]

    def clamp_thresholds(self):
        """Project every LISTA threshold back onto theta >= 0."""
        for theta in self.threshold_parameters():
            np.maximum(theta.data, 0.0, out=theta.data)

    def parameter_count(self) -> int:
        return sum(tensor.data.size for tensor in self.named_parameters().values())

    def zero_grad(self):
        for tensor in self.named_parameters().values():
            tensor.zero_grad()


def expected_parameter_count(n_baselines: int, n_bins: int, c0: int, n1: int, n2: int,
                             variant: str = 'aetomo') -> int:
    """
    Closed-form parameter count (a complex entry counts once):
    (N1 + N2)(N·M + N^2 + 1) + 1878·C0^2 + 64·C0 + 2 for 'aetomo',
    N1(N·M + N^2 + 1) for 'lista'.
    """
    per_block = n_bins * n_baselines + n_bins * n_bins + 1
    if variant == 'lista':
        return n1 * per_block
    return (n1 + n2) * per_block + 1878 * c0 * c0 + 64 * c0 + 2


def _init_lista_stack(R: MeasurementMatrix, count: int, theta_init: float) -> LISTAStackParams:
    """W1 = R^H / L, W2 = I - R^H R / L, theta = theta_init for every block."""
    lipschitz = R.lipschitz_constant
    adjoint = R.adjoint_entries
    w1 = adjoint / lipschitz
    w2 = np.eye(R.shape[1], dtype=np.complex128) - (adjoint @ R.entries) / lipschitz
    return LISTAStackParams([
        {'W1': de.parameter(w1), 'W2': de.parameter(w2), 'theta': de.parameter(np.array(theta_init))}
        for _ in range(count)
    ])


def _init_conv(rng: np.random.Generator, c_in: int, c_out: int, kernel_size: int = 3) -> ConvLayer:
    bound = 1.0 / np.sqrt(c_in * kernel_size * kernel_size)
    weight = rng.uniform(-bound, bound, size=(c_out, c_in, kernel_size, kernel_size))
    return ConvLayer(de.parameter(weight), de.parameter(np.zeros(c_out)))


def _init_up(rng: np.random.Generator, c_in: int, c_out: int) -> Tensor:
    bound = 1.0 / np.sqrt(c_out * 4)
    return de.parameter(rng.uniform(-bound, bound, size=(c_in, c_out, 2, 2)))


def init_params(
    R: MeasurementMatrix,
    c0: int = config.BASE_CHANNELS,
    n1: int = config.PRE_BLOCKS,
    n2: int = config.FINAL_BLOCKS,
    seed: int = config.NETWORK_SEED,
    theta_init: float = config.THETA_INIT,
    variant: str = config.NETWORK_VARIANT,
) -> NetworkParams:
    """
    Initialize a network for the measurement matrix R.

    LISTA blocks start from the ISTA iteration with step 1/L; conv kernels
    are drawn uniform in +-1/sqrt(fan_in) from a generator seeded by `seed`;
    biases start at zero.
    """
    network = NetworkConfig(variant=variant, base_channels=c0, pre_blocks=n1,
                            final_blocks=n2, theta_init=theta_init, seed=seed)
    n_baselines, n_bins = R.shape
    pre = _init_lista_stack(R, n1, theta_init)
    if variant == 'lista':
        return NetworkParams(pre, None, None, None, n_baselines, n_bins, network)

    rng = np.random.default_rng(seed)
    channels = [2] + [c0 * 2 ** level for level in range(ENCODER_DEPTH + 1)]  # 2, C0, 2C0, 4C0, 8C0
    enc_blocks = [
        (_init_conv(rng, channels[level], channels[level + 1]),
         _init_conv(rng, channels[level + 1], channels[level + 1]))
        for level in range(ENCODER_DEPTH)
    ]
    bottleneck = (_init_conv(rng, channels[3], channels[4]), _init_conv(rng, channels[4], channels[4]))
    enc = EncoderParams(enc_blocks, bottleneck)

    dec_blocks = []
    for level in range(ENCODER_DEPTH, 0, -1):
        deep, shallow = channels[level + 1], channels[level]
        dec_blocks.append({
            'up': _init_up(rng, deep, shallow),
            'conv1': _init_conv(rng, 2 * shallow, shallow),
            'conv2': _init_conv(rng, shallow, shallow),
        })
    head = _init_conv(rng, c0, 2, kernel_size=1)
    dec = DecoderParams(dec_blocks, head)

    fin = _init_lista_stack(R, n2, theta_init)
    params = NetworkParams(pre, enc, dec, fin, n_baselines, n_bins, network)
    logger.info("Initialized %s network with %d parameters", variant, params.parameter_count())
    return params


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except ShapeError as exc:
        raise ShapeError(f"{name}: {exc}") from exc


def padded_width(width: int) -> int:
    return -(-width // config.PAD_MULTIPLE) * config.PAD_MULTIPLE


def lista_stack_forward(stack: LISTAStackParams, g: Tensor, gamma0: Tensor) -> Tuple[Tensor, List[Tensor]]:
    """
    gamma_k = soft_{theta_k}(W1_k g + W2_k gamma_{k-1}) for every block.

    g and gamma0 are vectors (M, N) or column stacks (M x A, N x A).
    """
    if g.data.ndim != gamma0.data.ndim or (g.data.ndim == 2 and g.shape[1] != gamma0.shape[1]):
        raise ShapeError(f"observation {g.shape} and initial estimate {gamma0.shape} disagree")
    gamma = gamma0
    outputs = []
    for block in stack.blocks:
        z = de.add(de.linear_complex(block['W1'], g), de.linear_complex(block['W2'], gamma))
        gamma = de.soft_threshold(z, block['theta'])
        outputs.append(gamma)
    return gamma, outputs


def _as_tensor(obs) -> Tensor:
    g_slice = obs.g_slice if isinstance(obs, SliceObservation) else obs
    return g_slice if isinstance(g_slice, Tensor) else Tensor(np.asarray(g_slice, dtype=np.complex128))


def pre_image(params: NetworkParams, obs: SliceObservation) -> Tensor:
    """Pre-imaging stack applied to every azimuth column from gamma_0 = 0."""
    g = _as_tensor(obs)
    if g.data.ndim != 2 or g.shape[0] != params.n_baselines:
        raise ShapeError(f"slice shape {g.shape} needs {params.n_baselines} rows")
    gamma0 = Tensor(np.zeros((params.n_bins, g.shape[1]), dtype=np.complex128))
    gamma, _ = lista_stack_forward(params.pre, g, gamma0)
    return gamma


def _conv_relu(x: Tensor, layer: ConvLayer) -> Tensor:
    return de.relu(de.conv2d(x, layer.weight, layer.bias))


def encode(slice2ch: Tensor, enc: EncoderParams) -> List[Tensor]:
    """
    2D feature extraction.

    Returns:
        Pyramid [full, 1/2, 1/4, bottleneck 1/8] with C0, 2C0, 4C0, 8C0 channels
    """
    _, height, width = slice2ch.shape
    divisor = 2 ** ENCODER_DEPTH
    if height % divisor or width % divisor:
        raise ShapeError(f"slice {height} x {width} must be divisible by {divisor}")

    pyramid = []
    x = slice2ch
    for first, second in enc.blocks:
        level = _conv_relu(_conv_relu(x, first), second)
        pyramid.append(level)
        x, _ = de.maxpool2d(level)
    first, second = enc.bottleneck
    pyramid.append(_conv_relu(_conv_relu(x, first), second))
    return pyramid


def fuse(pyramid: List[Tensor], dec: DecoderParams, width: Optional[int] = None) -> Tensor:
    """
    2D feature fusion: up-sample, merge with the same-scale skip, two 3x3
    convs per block, then the 1x1 head to 2 channels cropped to `width`.
    """
    x = pyramid[-1]
    for block, skip in zip(dec.blocks, reversed(pyramid[:-1])):
        up = de.conv_transpose2d(x, block['up'])
        merged = de.concat_channels(up, skip)
        x = _conv_relu(_conv_relu(merged, block['conv1']), block['conv2'])
    out = de.conv2d(x, dec.head.weight, dec.head.bias)
    if width is not None and width != out.shape[2]:
        out = de.pad_crop(out, (out.shape[1], width), mode='center-crop')
    return out


def final_image(fin: LISTAStackParams, obs: SliceObservation, gamma2d: Tensor) -> Tensor:
    """Final stack per azimuth column, seeded with the fused estimate."""
    gamma, _ = lista_stack_forward(fin, _as_tensor(obs), gamma2d)
    return gamma


def forward(params: NetworkParams, obs: SliceObservation) -> Dict[str, Optional[Tensor]]:
    """
    Run the full network on one slice.

    Returns:
        {'gamma_1d', 'gamma_2d', 'gamma_final'}, each N x N_s complex;
        'gamma_2d' is None for the 'lista' variant, whose final output is
        the pre-imaging result
    """
    with _stage('pre-imaging'):
        gamma_1d = pre_image(params, obs)
    if params.variant == 'lista':
        return {'gamma_1d': gamma_1d, 'gamma_2d': None, 'gamma_final': gamma_1d}

    n_bins, width = gamma_1d.shape
    with _stage('feature-extraction'):
        slice2ch = de.pad_crop(de.complex_to_channels(gamma_1d), (n_bins, padded_width(width)))
        pyramid = encode(slice2ch, params.enc)
    with _stage('feature-fusion'):
        gamma_2d = de.channels_to_complex(fuse(pyramid, params.dec, width))
    with _stage('final-imaging'):
        gamma_final = final_image(params.fin, obs, gamma_2d)
    return {'gamma_1d': gamma_1d, 'gamma_2d': gamma_2d, 'gamma_final': gamma_final}


def reconstruct_slice(params: NetworkParams, g_slice: np.ndarray) -> np.ndarray:
    """Inference on one slice without recording a graph."""
    with de.no_grad():
        return forward(params, SliceObservation(g_slice))['gamma_final'].data.copy()


def reconstruct_volume(
    params: NetworkParams,
    observations: np.ndarray,
    threads: int = config.DEFAULT_THREADS,
    progress: bool = config.SHOW_PROGRESS,
) -> np.ndarray:
    """
    Network reconstruction of an M x A x D observation volume, one range
    slice at a time. Slices are independent, so threads only change timing.
    """
    if observations.ndim != 3 or observations.shape[0] != params.n_baselines:
        raise ShapeError(f"observation volume {observations.shape} needs {params.n_baselines} baselines")
    _, azimuth_count, range_count = observations.shape
    volume = np.zeros((params.n_bins, azimuth_count, range_count), dtype=np.complex128)

    def run(range_index: int):
        volume[:, :, range_index] = reconstruct_slice(
            params, np.ascontiguousarray(observations[:, :, range_index])
        )

    with tqdm(total=range_count, desc="Reconstructing slices", disable=not progress) as bar:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for _ in pool.map(run, range(range_count)):
                    bar.update(1)
        else:
            for range_index in range(range_count):
                run(range_index)
                bar.update(1)
    return volume


def empty_params(network: NetworkConfig, n_baselines: int, n_bins: int) -> NetworkParams:
    """Zero-filled parameters with the layout init_params produces; filled from a checkpoint."""

    def zeros(*shape, dtype=np.float64):
        return de.parameter(np.zeros(shape, dtype=dtype))

    def conv(c_in, c_out, k=3):
        return ConvLayer(zeros(c_out, c_in, k, k), zeros(c_out))

    def stack(count):
        return LISTAStackParams([
            {'W1': zeros(n_bins, n_baselines, dtype=np.complex128),
             'W2': zeros(n_bins, n_bins, dtype=np.complex128),
             'theta': zeros()}
            for _ in range(count)
        ])

    pre = stack(network.pre_blocks)
    if network.variant == 'lista':
        return NetworkParams(pre, None, None, None, n_baselines, n_bins, network)
    c0 = network.base_channels
    channels = [2] + [c0 * 2 ** level for level in range(ENCODER_DEPTH + 1)]
    enc = EncoderParams(
        [(conv(channels[level], channels[level + 1]), conv(channels[level + 1], channels[level + 1]))
         for level in range(ENCODER_DEPTH)],
        (conv(channels[3], channels[4]), conv(channels[4], channels[4])),
    )
    dec = DecoderParams(
        [{'up': zeros(channels[level + 1], channels[level], 2, 2),
          'conv1': conv(2 * channels[level], channels[level]),
          'conv2': conv(channels[level], channels[level])}
         for level in range(ENCODER_DEPTH, 0, -1)],
        conv(c0, 2, k=1),
    )
    return NetworkParams(pre, enc, dec, stack(network.final_blocks), n_baselines, n_bins, network)
