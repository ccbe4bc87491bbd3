"""
Slice-wise Training

Assembles azimuth-elevation slices into a dataset, evaluates the composite
loss L = L_1D + alpha * L_2D + beta * L_im over the staged network outputs,
and runs the optimization loop (one slice per step).
"""

import copy
import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

import config
import diffengine as de
from diffengine import Tensor
from errors import ConfigError, InvalidParameterError, NonFiniteLossError, ShapeError
from geometry import GroundTruthVolume, ObservationVolume
from network import NetworkParams, SliceObservation, forward

logger = logging.getLogger(__name__)

OPTIMIZERS = ('adam', 'sgd')
LOSS_PARTS = ('total', 'l1d', 'l2d', 'lim')


@dataclass(frozen=True)
class TrainConfig:
    """
    Training JSON document.

    Attributes:
        alpha: Weight of the 2D-fusion MSE term
        beta: Weight of the final-image term
        lambda_sparse: l1 weight inside the final-image term
        optimizer: 'adam' or 'sgd'
        learning_rate: Step size (> 0; 0 only to freeze parameters)
        lr_decay: Per-epoch factor in (0, 1]; epoch e uses learning_rate * lr_decay**e
        epochs: Total number of epochs (a resumed run stops at the same total)
        seed: Seed for the per-epoch slice order and the holdout split
        holdout_fraction: Share of slices kept out of training for monitoring
        checkpoint_interval: Epochs between checkpoints (0 disables)
    """

    alpha: float = config.ALPHA
    beta: float = config.BETA
    lambda_sparse: float = config.LAMBDA_SPARSE
    optimizer: str = config.OPTIMIZER
    learning_rate: float = config.LEARNING_RATE
    lr_decay: float = config.LR_DECAY
    adam_beta1: float = config.ADAM_BETA1
    adam_beta2: float = config.ADAM_BETA2
    adam_epsilon: float = config.ADAM_EPSILON
    epochs: int = config.EPOCHS
    seed: int = config.TRAIN_SEED
    holdout_fraction: float = config.HOLDOUT_FRACTION
    checkpoint_interval: int = config.CHECKPOINT_INTERVAL

    def __post_init__(self):
        for name in ('alpha', 'beta', 'lambda_sparse'):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise InvalidParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InvalidParameterError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidParameterError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.epochs < 0:
            raise InvalidParameterError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise InvalidParameterError(f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")
        if self.checkpoint_interval < 0:
            raise InvalidParameterError("checkpoint_interval must be >= 0")

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrainConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SliceItem:
    obs: SliceObservation
    target: np.ndarray
    range_index: int


@dataclass
class SliceDataset:
    """Azimuth-elevation slices ordered by range index."""

    items: List[SliceItem]
    provenance: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[SliceItem]:
        return iter(self.items)

    def __getitem__(self, index: int) -> SliceItem:
        return self.items[index]


def make_slices(truth: GroundTruthVolume, obs: ObservationVolume,
                provenance: Optional[Dict] = None) -> SliceDataset:
    """One item per range index: observations M x A and target N x A."""
    data = obs.data
    if data.ndim != 3 or data.shape[1:] != truth.reflectivity.shape[1:]:
        raise ShapeError(
            f"observation volume {data.shape} does not cover truth volume {truth.reflectivity.shape}"
        )
    items = [
        SliceItem(
            obs=SliceObservation(np.ascontiguousarray(data[:, :, d])),
            target=truth.reflectivity[:, :, d].astype(np.complex128),
            range_index=d,
        )
        for d in range(truth.range_count)
    ]
    info = {'noise_sigma': obs.noise_sigma, 'seed': obs.seed}
    info.update(provenance or {})
    return SliceDataset(items, info)


def split_holdout(dataset: SliceDataset, fraction: float = config.HOLDOUT_FRACTION,
                  seed: int = config.TRAIN_SEED) -> Tuple[SliceDataset, SliceDataset]:
    """
    Seeded train/holdout split; both parts keep range order and at least
    one slice always stays in training.
    """
    if not 0.0 <= fraction < 1.0:
        raise InvalidParameterError(f"holdout fraction must be in [0, 1), got {fraction}")
    count = min(int(np.floor(fraction * len(dataset))), max(len(dataset) - 1, 0))
    chosen = set(np.random.default_rng(seed).permutation(len(dataset))[:count].tolist())
    train_items = [item for i, item in enumerate(dataset.items) if i not in chosen]
    holdout_items = [item for i, item in enumerate(dataset.items) if i in chosen]
    return (SliceDataset(train_items, dict(dataset.provenance)),
            SliceDataset(holdout_items, dict(dataset.provenance)))


def composite_loss(out: Dict[str, Optional[Tensor]], target, cfg: TrainConfig) -> Tuple[Tensor, Dict[str, float]]:
    """
    Composite loss of one slice, each term divided by the slice width N_s:

        l1d = sum_i ||gamma_1d_i - gamma*_i||^2 / N_s
        l2d = sum_i ||gamma_2d_i - gamma*_i||^2 / N_s
        lim = sum_i (||gamma_i - gamma*_i||^2 + lambda ||gamma_i||_1) / N_s
        total = l1d + alpha * l2d + beta * lim

    Outputs without a fusion stage (variant 'lista') are trained on lim alone.

    Returns:
        (total as a graph scalar, {'total', 'l1d', 'l2d', 'lim'} as floats)
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.complex128))
    final = out['gamma_final']
    if final.shape != target.shape:
        raise ShapeError(f"output {final.shape} and target {target.shape} differ")
    inv_width = 1.0 / target.shape[1]

    lim = de.scale(de.add(de.mse_loss(final, target),
                          de.scale(de.l1_loss(final), cfg.lambda_sparse)), inv_width)
    if out.get('gamma_2d') is None:
        parts = {'total': lim.item(), 'l1d': 0.0, 'l2d': 0.0, 'lim': lim.item()}
        return lim, parts

    l1d = de.scale(de.mse_loss(out['gamma_1d'], target), inv_width)
    l2d = de.scale(de.mse_loss(out['gamma_2d'], target), inv_width)
    total = de.add(de.add(l1d, de.scale(l2d, cfg.alpha)), de.scale(lim, cfg.beta))
    parts = {'total': total.item(), 'l1d': l1d.item(), 'l2d': l2d.item(), 'lim': lim.item()}
    return total, parts


class Optimizer:
    """Updates named parameters in place from their accumulated gradients."""

    def __init__(self, params: Dict[str, Tensor], learning_rate: float):
        self.params = params
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self):
        raise NotImplementedError

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {'step': np.array(float(self.step_count))}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.step_count = int(state['step'])


class SGD(Optimizer):
    """Plain gradient descent: p <- p - lr * dL/dp (dL/dRe + i·dL/dIm for complex p)."""

    def step(self):
        self.step_count += 1
        for tensor in self.params.values():
            direction = de.descent_direction(tensor)
            if direction is not None:
                tensor.data -= self.learning_rate * direction


class Adam(Optimizer):
    """
    Adam with bias correction. Complex parameters are updated as pairs of
    real numbers (real and imaginary parts with independent moments).
    """

    def __init__(self, params: Dict[str, Tensor], learning_rate: float,
                 beta1: float = config.ADAM_BETA1, beta2: float = config.ADAM_BETA2,
                 epsilon: float = config.ADAM_EPSILON):
        super().__init__(params, learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {name: np.zeros_like(self._real_view(t.data)) for name, t in params.items()}
        self.v = {name: np.zeros_like(self._real_view(t.data)) for name, t in params.items()}

    @staticmethod
    def _real_view(array: np.ndarray) -> np.ndarray:
        array = np.atleast_1d(array)
        return array.view(np.float64) if np.iscomplexobj(array) else array

    def step(self):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params.items():
            direction = de.descent_direction(tensor)
            if direction is None:
                continue
            grad = self._real_view(np.ascontiguousarray(direction))
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)
            self._real_view(tensor.data)[...] -= update

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = super().state_dict()
        for name in self.params:
            state[f'm.{name}'] = self.m[name].copy()
            state[f'v.{name}'] = self.v[name].copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        super().load_state_dict(state)
        for name in self.params:
            self.m[name][...] = state[f'm.{name}']
            self.v[name][...] = state[f'v.{name}']


def make_optimizer(params: NetworkParams, cfg: TrainConfig) -> Optimizer:
    named = params.named_parameters()
    if cfg.optimizer == 'sgd':
        return SGD(named, cfg.learning_rate)
    return Adam(named, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)


def dataset_loss(params: NetworkParams, dataset: SliceDataset, cfg: TrainConfig) -> Dict[str, float]:
    """Mean loss parts over a dataset without recording a graph."""
    totals = dict.fromkeys(LOSS_PARTS, 0.0)
    if not len(dataset):
        return totals
    with de.no_grad():
        for item in dataset:
            _, parts = composite_loss(forward(params, item.obs), item.target, cfg)
            for key in LOSS_PARTS:
                totals[key] += parts[key]
    return {key: value / len(dataset) for key, value in totals.items()}


CheckpointCallback = Callable[[int, NetworkParams, Optimizer], None]


def train(
    dataset: SliceDataset,
    init: NetworkParams,
    cfg: TrainConfig = TrainConfig(),
    holdout: Optional[SliceDataset] = None,
    start_epoch: int = 0,
    optimizer_state: Optional[Dict[str, np.ndarray]] = None,
    checkpoint_callback: Optional[CheckpointCallback] = None,
    progress: bool = config.SHOW_PROGRESS,
) -> Tuple[NetworkParams, List[Dict[str, float]]]:
    """
    Train a copy of `init` for epochs start_epoch .. cfg.epochs - 1.

    Each step runs one slice forward, back-propagates the composite loss,
    applies the optimizer and clamps every threshold to >= 0. Epoch e steps
    with learning_rate * lr_decay**e. The slice
    order of each epoch is drawn from (seed, epoch), so resumed runs follow
    the same schedule as uninterrupted ones.

    Returns:
        (trained params, history) with one row per epoch holding the mean
        pre-update loss parts {'epoch', 'total', 'l1d', 'l2d', 'lim'}.
        checkpoint_callback(epochs_done, params, optimizer) runs every
        checkpoint_interval epochs and after the last epoch

    Raises:
        InvalidParameterError: empty dataset
        NonFiniteLossError: NaN or infinite loss; carries epoch and slice index
    """
    if not len(dataset):
        raise InvalidParameterError("training dataset is empty")
    params = copy.deepcopy(init)
    optimizer = make_optimizer(params, cfg)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    history = []
    epochs = range(start_epoch, cfg.epochs)
    logger.info("Training %s network on %d slices for epochs %d..%d",
                params.variant, len(dataset), start_epoch, cfg.epochs - 1)

    for epoch in tqdm(epochs, desc="Training epochs", disable=not progress):
        optimizer.learning_rate = cfg.learning_rate * cfg.lr_decay ** epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        # summed in dataset order so the epoch mean does not depend on the shuffle
        per_slice = np.zeros((len(dataset), len(LOSS_PARTS)))
        for position in order:
            position = int(position)
            item = dataset[position]
            params.zero_grad()
            total, parts = composite_loss(forward(params, item.obs), item.target, cfg)
            if not np.isfinite(parts['total']):
                raise NonFiniteLossError(epoch, item.range_index, parts['total'])
            de.backward(total)
            optimizer.step()
            params.clamp_thresholds()
            per_slice[position] = [parts[key] for key in LOSS_PARTS]

        row = {'epoch': epoch}
        row.update(zip(LOSS_PARTS, (per_slice.sum(axis=0) / len(dataset)).tolist()))
        history.append(row)
        if holdout is not None and len(holdout):
            held = dataset_loss(params, holdout, cfg)
            logger.info("epoch %d: train %.6g  holdout %.6g", epoch, row['total'], held['total'])
        else:
            logger.info("epoch %d: train %.6g", epoch, row['total'])

        last = epoch + 1 == cfg.epochs
        periodic = cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0
        if checkpoint_callback and (periodic or last):
            checkpoint_callback(epoch + 1, params, optimizer)

    params.zero_grad()
    return params, history
