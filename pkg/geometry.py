"""
Acquisition Geometry & Observation Synthesis

Builds the multi-baseline geometry, the steering (measurement) matrix that
maps elevation reflectivity to observations, synthetic ground-truth scenes
and noisy observation stacks following g = R·gamma + n.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np

import config
from errors import (
    ConfigError,
    InvalidGeometryError,
    InvalidParameterError,
    OutOfGridError,
    ShapeError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BaselineSet:
    """
    Perpendicular baselines of the acquisition stack plus radar constants.

    Attributes:
        offsets: M strictly increasing baseline offsets in meters
        wavelength: Radar wavelength in meters
        reference_range: Scene-center slant range r0 in meters
        incidence_deg: Incidence angle of the reference track in degrees
        reference_height: Reference track height in meters (metadata only)
    """

    offsets: np.ndarray
    wavelength: float
    reference_range: float
    incidence_deg: float = config.INCIDENCE_DEG
    reference_height: float = config.REFERENCE_HEIGHT

    def __post_init__(self):
        offsets = np.array(self.offsets, dtype=np.float64)
        if offsets.ndim != 1 or offsets.size < 2:
            raise InvalidGeometryError(
                f"need at least 2 baselines, got {offsets.size}"
            )
        if np.any(np.diff(offsets) <= 0):
            raise InvalidGeometryError("baseline offsets must be strictly increasing")
        if not self.wavelength > 0:
            raise InvalidParameterError(f"wavelength must be > 0, got {self.wavelength}")
        if not self.reference_range > 0:
            raise InvalidParameterError(
                f"reference range must be > 0, got {self.reference_range}"
            )
        offsets.setflags(write=False)
        object.__setattr__(self, 'offsets', offsets)

    @property
    def count(self) -> int:
        return self.offsets.size


@dataclass(frozen=True, eq=False)
class ElevationGrid:
    """Uniform elevation discretization with N bin centers in [s_min, s_max]."""

    n_bins: int
    s_min: float
    s_max: float

    def __post_init__(self):
        if int(self.n_bins) != self.n_bins or self.n_bins < 2:
            raise InvalidGeometryError(f"need at least 2 elevation bins, got {self.n_bins}")
        if not self.s_min < self.s_max:
            raise InvalidGeometryError(
                f"elevation extent must satisfy s_min < s_max, got [{self.s_min}, {self.s_max}]"
            )

    @cached_property
    def centers(self) -> np.ndarray:
        centers = np.linspace(self.s_min, self.s_max, self.n_bins)
        centers.setflags(write=False)
        return centers

    @property
    def spacing(self) -> float:
        return (self.s_max - self.s_min) / (self.n_bins - 1)

    def nearest_bin(self, elevation: float) -> int:
        """
        Map an elevation to its nearest bin index.

        Raises:
            OutOfGridError: if the elevation lies outside [s_min, s_max]
        """
        slack = 1e-9 * self.spacing
        if elevation < self.s_min - slack or elevation > self.s_max + slack:
            raise OutOfGridError(
                f"elevation {elevation} m outside grid [{self.s_min}, {self.s_max}]"
            )
        index = int(np.rint((elevation - self.s_min) / self.spacing))
        return min(max(index, 0), self.n_bins - 1)


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    """
    M x N steering matrix R with entries exp(i·4π·b_m·s_n / (λ·r0)).

    Immutable after construction and safe to share across threads.
    """

    entries: np.ndarray
    baselines: BaselineSet
    grid: ElevationGrid

    def __post_init__(self):
        expected = (self.baselines.count, self.grid.n_bins)
        if self.entries.shape != expected:
            raise ShapeError(f"steering matrix shape {self.entries.shape} != {expected}")
        self.entries.setflags(write=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape

    @cached_property
    def adjoint_entries(self) -> np.ndarray:
        adjoint = np.ascontiguousarray(self.entries.conj().T)
        adjoint.setflags(write=False)
        return adjoint

    def apply(self, gamma: np.ndarray) -> np.ndarray:
        """Forward model R·gamma (gamma: N or N x ...)."""
        return self.entries @ gamma

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        """Adjoint R^H·g (g: M or M x ...)."""
        return self.adjoint_entries @ g

    @cached_property
    def lipschitz_constant(self) -> float:
        """
        Largest eigenvalue of R^H R by power iteration.

        Starts from a fixed pseudo-random vector so every call on the same
        matrix returns the same value.
        """
        rng = np.random.default_rng(0)
        n_bins = self.grid.n_bins
        vector = rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins)
        vector /= np.linalg.norm(vector)

        estimate = 0.0
        for iteration in range(config.POWER_ITERATION_MAX):
            image = self.adjoint(self.apply(vector))
            new_estimate = float(np.linalg.norm(image))
            if new_estimate == 0.0:
                return 0.0
            vector = image / new_estimate
            converged = abs(new_estimate - estimate) <= config.POWER_ITERATION_TOL * new_estimate
            estimate = new_estimate
            if converged:
                break
        logger.debug("Lipschitz constant %.6g after %d power iterations", estimate, iteration + 1)
        return estimate


@dataclass(frozen=True, eq=False)
class GroundTruthVolume:
    """Non-negative reflectivity of shape N x A x D (elevation, azimuth, range)."""

    reflectivity: np.ndarray
    grid: ElevationGrid
    max_scatterers_per_cell: int = config.MAX_SCATTERERS_PER_CELL

    def __post_init__(self):
        volume = np.asarray(self.reflectivity, dtype=np.float64)
        if volume.ndim != 3 or volume.shape[0] != self.grid.n_bins:
            raise ShapeError(
                f"reflectivity shape {volume.shape} does not match {self.grid.n_bins} elevation bins"
            )
        if np.any(volume < 0):
            raise InvalidParameterError("reflectivity must be non-negative")
        peak_sparsity = int(np.count_nonzero(volume, axis=0).max(initial=0))
        if peak_sparsity > self.max_scatterers_per_cell:
            raise InvalidParameterError(
                f"{peak_sparsity} scatterers in one cell exceeds cap {self.max_scatterers_per_cell}"
            )
        object.__setattr__(self, 'reflectivity', volume)

    @property
    def azimuth_count(self) -> int:
        return self.reflectivity.shape[1]

    @property
    def range_count(self) -> int:
        return self.reflectivity.shape[2]


@dataclass(frozen=True, eq=False)
class ObservationVolume:
    """Complex observations of shape M x A x D."""

    data: np.ndarray
    noise_sigma: float
    seed: int


@dataclass(frozen=True)
class GeometryConfig:
    """Geometry JSON document; every key defaults to config.py."""

    num_baselines: int = config.NUM_BASELINES
    baseline_min: float = config.BASELINE_MIN
    baseline_max: float = config.BASELINE_MAX
    wavelength: float = config.WAVELENGTH
    reference_range: float = config.REFERENCE_RANGE
    incidence_deg: float = config.INCIDENCE_DEG
    reference_height: float = config.REFERENCE_HEIGHT
    elevation_bins: int = config.ELEVATION_BINS
    elevation_min: float = config.ELEVATION_MIN
    elevation_max: float = config.ELEVATION_MAX

    @classmethod
    def from_dict(cls, data: Dict) -> 'GeometryConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown geometry keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)

    def baselines(self) -> BaselineSet:
        return build_baselines(
            self.num_baselines,
            self.baseline_min,
            self.baseline_max,
            self.wavelength,
            self.reference_range,
            incidence_deg=self.incidence_deg,
            reference_height=self.reference_height,
        )

    def grid(self) -> ElevationGrid:
        return ElevationGrid(self.elevation_bins, self.elevation_min, self.elevation_max)

    def measurement_matrix(self) -> MeasurementMatrix:
        return build_measurement_matrix(self.baselines(), self.grid())


SCENE_COMPONENT_TYPES = ('point', 'two_point', 'horizontal_plane', 'oblique_plane')


@dataclass(frozen=True)
class SceneSpec:
    """
    Synthetic scene description.

    Components (superposed in order):
        point:            azimuth, range, elevation, amplitude
        two_point:        azimuth, range, elevations [s1, s2], amplitudes [a1, a2]
        horizontal_plane: elevation, amplitude, optional azimuth_span / range_span
        oblique_plane:    elevation (at azimuth 0, range 0), azimuth_slope and
                          range_slope in meters of elevation per cell, amplitude,
                          optional azimuth_span / range_span

    Spans are [start, stop) cell index pairs; planes cover every cell by default.
    """

    azimuth_count: int = config.SLICE_WIDTH
    range_count: int = 1
    components: Tuple[Dict, ...] = field(default_factory=tuple)
    max_scatterers_per_cell: int = config.MAX_SCATTERERS_PER_CELL

    def __post_init__(self):
        if self.azimuth_count < 1 or self.range_count < 1:
            raise InvalidParameterError("scene needs at least one azimuth and one range cell")
        for component in self.components:
            kind = component.get('type')
            if kind not in SCENE_COMPONENT_TYPES:
                raise ConfigError(
                    f"unknown scene component type {kind!r}; expected one of {SCENE_COMPONENT_TYPES}"
                )
            amplitudes = component.get('amplitudes', [component.get('amplitude', 1.0)])
            if any(a <= 0 for a in amplitudes):
                raise InvalidParameterError("scatterer amplitudes must be > 0")

    @classmethod
    def from_dict(cls, data: Dict) -> 'SceneSpec':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        data = dict(data)
        data['components'] = tuple(dict(c) for c in data.get('components', ()))
        return cls(**data)

    def to_dict(self) -> Dict:
        return {
            'azimuth_count': self.azimuth_count,
            'range_count': self.range_count,
            'components': [dict(c) for c in self.components],
            'max_scatterers_per_cell': self.max_scatterers_per_cell,
        }


def build_baselines(
    count: int,
    b_min: float,
    b_max: float,
    wavelength: float,
    reference_range: float,
    incidence_deg: float = config.INCIDENCE_DEG,
    reference_height: float = config.REFERENCE_HEIGHT,
) -> BaselineSet:
    """
    Build `count` uniformly spaced baselines from b_min to b_max inclusive.

    Raises:
        InvalidGeometryError: count < 2 or b_min >= b_max
        InvalidParameterError: non-positive wavelength or reference range
    """
    if count < 2:
        raise InvalidGeometryError(f"need at least 2 baselines, got {count}")
    if not b_min < b_max:
        raise InvalidGeometryError(f"baseline range must satisfy b_min < b_max, got [{b_min}, {b_max}]")
    return BaselineSet(
        offsets=np.linspace(b_min, b_max, count),
        wavelength=wavelength,
        reference_range=reference_range,
        incidence_deg=incidence_deg,
        reference_height=reference_height,
    )


def build_measurement_matrix(baselines: BaselineSet, grid: ElevationGrid) -> MeasurementMatrix:
    """Steering matrix with entries exp(i·4π·b_m·s_n / (λ·r0)), positive exponent."""
    spatial_frequency = 4.0 * np.pi / (baselines.wavelength * baselines.reference_range)
    phase = spatial_frequency * np.outer(baselines.offsets, grid.centers)
    return MeasurementMatrix(np.exp(1j * phase), baselines, grid)


def elevation_to_height(elevation, incidence_deg: float = config.INCIDENCE_DEG):
    """Project elevation (perpendicular to line of sight) onto height."""
    return np.asarray(elevation) * np.sin(np.deg2rad(incidence_deg))


def _span(component: Dict, key: str, count: int) -> range:
    start, stop = component.get(key, (0, count))
    if not 0 <= start < stop <= count:
        raise InvalidParameterError(f"{key} {[start, stop]} outside [0, {count})")
    return range(start, stop)


def _component_scatterers(component: Dict, spec: SceneSpec) -> List[Tuple[int, int, float, float]]:
    """Expand one scene component into (azimuth, range, elevation, amplitude) tuples."""
    kind = component['type']
    if kind == 'point':
        return [(component['azimuth'], component['range'],
                 component['elevation'], component.get('amplitude', 1.0))]

    if kind == 'two_point':
        elevations = component['elevations']
        amplitudes = component.get('amplitudes', [component.get('amplitude', 1.0)] * 2)
        if len(elevations) != 2 or len(amplitudes) != 2:
            raise ConfigError("two_point needs exactly two elevations and amplitudes")
        return [(component['azimuth'], component['range'], s, a)
                for s, a in zip(elevations, amplitudes)]

    azimuth_slope = component.get('azimuth_slope', 0.0) if kind == 'oblique_plane' else 0.0
    range_slope = component.get('range_slope', 0.0) if kind == 'oblique_plane' else 0.0
    amplitude = component.get('amplitude', 1.0)
    return [
        (a, d, component['elevation'] + azimuth_slope * a + range_slope * d, amplitude)
        for a in _span(component, 'azimuth_span', spec.azimuth_count)
        for d in _span(component, 'range_span', spec.range_count)
    ]


def generate_scene(spec: SceneSpec, grid: ElevationGrid) -> GroundTruthVolume:
    """
    Rasterize a scene spec onto the elevation grid by nearest-bin assignment.

    Scatterers that land in the same bin add their amplitudes.

    Raises:
        OutOfGridError: a scatterer lies outside [s_min, s_max]
        InvalidParameterError: cell coordinates outside the scene, or more
            than max_scatterers_per_cell nonzeros in one cell
    """
    volume = np.zeros((grid.n_bins, spec.azimuth_count, spec.range_count))
    for component in spec.components:
        for azimuth, range_index, elevation, amplitude in _component_scatterers(component, spec):
            if not (0 <= azimuth < spec.azimuth_count and 0 <= range_index < spec.range_count):
                raise InvalidParameterError(
                    f"cell (azimuth={azimuth}, range={range_index}) outside scene "
                    f"{spec.azimuth_count} x {spec.range_count}"
                )
            volume[grid.nearest_bin(elevation), azimuth, range_index] += amplitude

    truth = GroundTruthVolume(volume, grid, spec.max_scatterers_per_cell)
    logger.info(
        "Generated scene: %d scatterers over %d x %d cells",
        np.count_nonzero(volume), spec.azimuth_count, spec.range_count,
    )
    return truth


def _cell_noise(shape_m: int, noise_sigma: float, seed: int, range_index: int, azimuth: int) -> np.ndarray:
    rng = np.random.default_rng([seed, range_index, azimuth])
    draws = rng.standard_normal((2, shape_m))
    return noise_sigma * (draws[0] + 1j * draws[1])


def synthesize_observation(
    R: MeasurementMatrix,
    truth: GroundTruthVolume,
    noise_sigma: float = config.NOISE_SIGMA,
    seed: int = 0,
    threads: int = config.DEFAULT_THREADS,
) -> ObservationVolume:
    """
    Synthesize g = R·gamma + n for every range-azimuth cell.

    Noise is circular complex Gaussian with per-component standard deviation
    noise_sigma, drawn from a stream seeded by (seed, range, azimuth), so
    the result does not depend on `threads`.

    Raises:
        ShapeError: truth elevation axis does not match R
        InvalidParameterError: negative noise_sigma or seed
    """
    if truth.reflectivity.shape[0] != R.shape[1]:
        raise ShapeError(
            f"truth has {truth.reflectivity.shape[0]} elevation bins, matrix expects {R.shape[1]}"
        )
    if noise_sigma < 0:
        raise InvalidParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")

    n_baselines = R.shape[0]
    azimuth_count, range_count = truth.azimuth_count, truth.range_count
    data = np.tensordot(R.entries, truth.reflectivity.astype(np.complex128), axes=(1, 0))

    if noise_sigma > 0:
        def add_range_noise(range_index: int):
            for azimuth in range(azimuth_count):
                data[:, azimuth, range_index] += _cell_noise(
                    n_baselines, noise_sigma, seed, range_index, azimuth
                )

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(add_range_noise, range(range_count)))
        else:
            for range_index in range(range_count):
                add_range_noise(range_index)

    return ObservationVolume(data=np.ascontiguousarray(data), noise_sigma=noise_sigma, seed=seed)
