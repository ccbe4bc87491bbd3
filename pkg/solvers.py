"""
Classical Sparse Inversion

Per-cell complex LASSO solvers (ISTA, FISTA) recovering an elevation
profile from one range-azimuth cell's multi-baseline observations.
Used as the baseline reconstructor and as the oracle the unrolled
network is checked against.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

import config
from errors import (
    CellSolveError,
    ConfigError,
    InvalidParameterError,
    ShapeError,
    StepSizeError,
    TomoError,
)
from geometry import MeasurementMatrix, ObservationVolume

logger = logging.getLogger(__name__)

SOLVER_METHODS = ('ista', 'fista')


@dataclass(frozen=True)
class SolverConfig:
    """
    Settings for ISTA/FISTA.

    Attributes:
        reg_lambda: l1 weight, or 'auto' for REG_LAMBDA_FACTOR * ||R^H g||_inf per cell
        max_iters: Iteration cap
        tol: Stop when ||x_{k+1} - x_k|| < tol * max(||x_{k+1}||, tiny)
        step: Gradient step, or 'auto' for 1/L (L = largest eigenvalue of R^H R)
    """

    reg_lambda: Union[float, str] = 'auto'
    max_iters: int = config.MAX_ITERS
    tol: float = config.TOLERANCE
    step: Union[float, str] = 'auto'

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise InvalidParameterError(f"tol must be >= 0, got {self.tol}")
        if self.step != 'auto' and not self.step > 0:
            raise InvalidParameterError(f"step must be > 0 or 'auto', got {self.step}")
        if self.reg_lambda != 'auto' and not self.reg_lambda > 0:
            raise InvalidParameterError(
                f"reg_lambda must be > 0 or 'auto', got {self.reg_lambda}"
            )

    @classmethod
    def from_dict(cls, data: Dict) -> 'SolverConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


def soft_threshold(z, theta: float):
    """
    Complex soft-thresholding (phase-preserving magnitude shrinkage).

    Returns z * max(|z| - theta, 0) / |z|, and 0 where z == 0. Works
    elementwise on scalars and arrays.

    Raises:
        InvalidParameterError: theta < 0
    """
    if theta < 0:
        raise InvalidParameterError(f"threshold must be >= 0, got {theta}")
    z = np.asarray(z)
    magnitude = np.abs(z)
    shrunk = np.maximum(magnitude - theta, 0.0)
    with np.errstate(divide='ignore', invalid='ignore'):
        scale = np.where(magnitude > 0, shrunk / np.where(magnitude > 0, magnitude, 1.0), 0.0)
    result = z * scale
    return result[()] if result.ndim == 0 else result


def _check_shapes(R: MeasurementMatrix, g: np.ndarray, gamma: Optional[np.ndarray] = None):
    n_baselines, n_bins = R.shape
    if g.shape != (n_baselines,):
        raise ShapeError(f"observation shape {g.shape} != ({n_baselines},)")
    if gamma is not None and gamma.shape != (n_bins,):
        raise ShapeError(f"estimate shape {gamma.shape} != ({n_bins},)")


def objective(R: MeasurementMatrix, g: np.ndarray, gamma: np.ndarray, reg_lambda: float) -> float:
    """LASSO objective 0.5 * ||g - R gamma||^2 + reg_lambda * sum |gamma|."""
    g = np.asarray(g)
    gamma = np.asarray(gamma)
    _check_shapes(R, g, gamma)
    residual = g - R.apply(gamma)
    return float(0.5 * np.vdot(residual, residual).real + reg_lambda * np.abs(gamma).sum())


def resolve_reg_lambda(R: MeasurementMatrix, g: np.ndarray, cfg: SolverConfig) -> float:
    """Scale-adaptive lambda for 'auto' (zero for an all-zero cell)."""
    if cfg.reg_lambda == 'auto':
        return config.REG_LAMBDA_FACTOR * float(np.abs(R.adjoint(g)).max(initial=0.0))
    return float(cfg.reg_lambda)


def resolve_step(R: MeasurementMatrix, cfg: SolverConfig) -> float:
    if cfg.step == 'auto':
        lipschitz = R.lipschitz_constant
        return 1.0 / lipschitz if lipschitz > 0 else 1.0
    return float(cfg.step)


def _run_iterations(
    R: MeasurementMatrix,
    g: np.ndarray,
    cfg: SolverConfig,
    accelerated: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    """Shared proximal-gradient loop; accelerated=False reduces to ISTA."""
    g = np.asarray(g, dtype=np.complex128)
    _check_shapes(R, g)
    reg_lambda = resolve_reg_lambda(R, g, cfg)
    step = resolve_step(R, cfg)
    threshold = reg_lambda * step

    gamma = np.zeros(R.shape[1], dtype=np.complex128)
    extrapolated = gamma
    t_k = 1.0
    history = []
    increases = 0
    # FISTA ripples are not divergence; only climbs past the starting objective count
    ceiling = 0.5 * float(np.vdot(g, g).real) if accelerated else -np.inf

    for _ in range(cfg.max_iters):
        gradient_point = extrapolated + step * R.adjoint(g - R.apply(extrapolated))
        new_gamma = soft_threshold(gradient_point, threshold)

        if accelerated:
            t_next = (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k)) / 2.0
            momentum = (t_k - 1.0) / t_next
            t_k = t_next
        else:
            momentum = 0.0
        extrapolated = new_gamma + momentum * (new_gamma - gamma) if momentum else new_gamma

        value = objective(R, g, new_gamma, reg_lambda)
        if history and value > history[-1] + 1e-12 * abs(history[-1]) and value > ceiling:
            increases += 1
            if increases >= config.DIVERGENCE_PATIENCE:
                raise StepSizeError(
                    f"objective increased for {increases} consecutive iterations "
                    f"(step={step:.3g}); reduce the step size"
                )
        else:
            increases = 0
        history.append(value)

        change = np.linalg.norm(new_gamma - gamma)
        scale = max(np.linalg.norm(new_gamma), np.finfo(float).tiny)
        gamma = new_gamma
        if change < cfg.tol * scale:
            break

    return gamma, np.asarray(history)


def ista_solve(
    R: MeasurementMatrix,
    g: np.ndarray,
    cfg: SolverConfig = SolverConfig(),
) -> Tuple[np.ndarray, np.ndarray]:
    """
    ISTA from gamma_0 = 0:
    gamma_{k+1} = soft_{lambda*step}(gamma_k + step * R^H (g - R gamma_k)).

    Returns:
        (gamma_hat, history) where history[k] is the objective after iteration k+1

    Raises:
        StepSizeError: objective increased DIVERGENCE_PATIENCE times in a row
    """
    return _run_iterations(R, g, cfg, accelerated=False)


def fista_solve(
    R: MeasurementMatrix,
    g: np.ndarray,
    cfg: SolverConfig = SolverConfig(),
    momentum: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    FISTA: ISTA step taken at a Nesterov extrapolation with
    t_1 = 1, t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2.

    With momentum=False (t_k fixed at 1) the iterates are exactly ISTA's.
    """
    return _run_iterations(R, g, cfg, accelerated=momentum)


def solve_volume(
    R: MeasurementMatrix,
    obs: ObservationVolume,
    cfg: SolverConfig = SolverConfig(),
    method: str = 'ista',
    threads: int = config.DEFAULT_THREADS,
    progress: bool = config.SHOW_PROGRESS,
) -> np.ndarray:
    """
    Reconstruct an N x A x D complex volume cell by cell.

    Range lines are distributed over `threads` workers; each cell is solved
    independently, so the output does not depend on the thread count.

    Raises:
        InvalidParameterError: unknown method
        ShapeError: observation does not have M rows
        CellSolveError: a cell failed; carries (azimuth, range)
    """
    if method not in SOLVER_METHODS:
        raise InvalidParameterError(f"unknown method {method!r}; expected one of {SOLVER_METHODS}")
    data = obs.data
    if data.ndim != 3 or data.shape[0] != R.shape[0]:
        raise ShapeError(f"observation volume shape {data.shape} incompatible with {R.shape[0]} baselines")

    solve = ista_solve if method == 'ista' else fista_solve
    _, azimuth_count, range_count = data.shape
    volume = np.zeros((R.shape[1], azimuth_count, range_count), dtype=np.complex128)
    R.lipschitz_constant  # computed once before workers share it

    def solve_range_line(range_index: int):
        for azimuth in range(azimuth_count):
            try:
                volume[:, azimuth, range_index], _ = solve(R, data[:, azimuth, range_index], cfg)
            except TomoError as exc:
                raise CellSolveError(str(exc), (azimuth, range_index)) from exc

    logger.info("Solving %d cells with %s (threads=%d)", azimuth_count * range_count, method, threads)
    with tqdm(total=range_count, desc=f"{method.upper()} range lines", disable=not progress) as bar:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for _ in pool.map(solve_range_line, range(range_count)):
                    bar.update(1)
        else:
            for range_index in range(range_count):
                solve_range_line(range_index)
                bar.update(1)
    return volume
