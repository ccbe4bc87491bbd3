"""
Error hierarchy for the AETomo toolkit.

Every error carries a machine-readable category and the exit code the
command line reports for it.
"""

from typing import Optional, Tuple


class TomoError(Exception):
    """Base class for all toolkit errors."""

    category = 'internal'
    exit_code = 1


class ConfigError(TomoError):
    """Malformed or inconsistent JSON configuration."""

    category = 'config'
    exit_code = 3


class InvalidParameterError(TomoError, ValueError):
    """A numeric parameter is outside its allowed range."""

    category = 'invalid-parameter'
    exit_code = 4


class InvalidGeometryError(InvalidParameterError):
    """Baseline set or elevation grid violates its invariants."""

    category = 'invalid-geometry'


class OutOfGridError(InvalidParameterError):
    """A scatterer lies outside the elevation grid."""

    category = 'out-of-grid'


class ShapeError(TomoError, ValueError):
    """Array dimensions do not agree."""

    category = 'shape'
    exit_code = 5


class ArchiveError(TomoError):
    """Tensor archive is corrupt or inconsistent."""

    category = 'archive'
    exit_code = 6


class MissingInputError(TomoError, FileNotFoundError):
    """An input file or directory does not exist."""

    category = 'missing-input'
    exit_code = 6


class StepSizeError(TomoError):
    """Iterative solver diverged (objective kept increasing)."""

    category = 'step-size'
    exit_code = 7


class CellSolveError(TomoError):
    """A per-cell solve failed; carries the cell coordinates."""

    category = 'solver'
    exit_code = 7

    def __init__(self, message: str, cell: Tuple[int, int]):
        super().__init__(f"cell (azimuth={cell[0]}, range={cell[1]}): {message}")
        self.cell = cell


class NonFiniteLossError(TomoError):
    """Training produced a NaN or infinite loss."""

    category = 'non-finite-loss'
    exit_code = 7

    def __init__(self, epoch: int, slice_index: int, value: Optional[float] = None):
        super().__init__(
            f"non-finite loss {value} at epoch {epoch}, slice {slice_index}"
        )
        self.epoch = epoch
        self.slice_index = slice_index


class GraphError(TomoError):
    """Misuse of the differentiation graph."""

    category = 'graph'
    exit_code = 8


class UndefinedMetricError(TomoError):
    """A point-cloud metric cannot be computed for the given clouds."""

    category = 'undefined-metric'
    exit_code = 9
