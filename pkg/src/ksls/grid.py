"""Cell-centered rectangular grids and the scalar fields living on them.

The domain is an interval or a rectangle, split into uniform cells; every
field stores one value per cell center.  Cell-centered placement with
midpoint quadrature makes the reflected (ghost-cell) Neumann boundary exact
for the difference operators built on top of this module, and keeps the
discrete integral of a Laplacian at zero up to floating-point summation.

Fields are immutable once constructed: the backing array is marked
read-only, and all operations return new fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np


class GridError(ValueError):
    """Invalid grid construction or mismatched grids in an operation."""


class FieldError(ValueError):
    """Invalid field data (wrong size, non-finite entries)."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered mesh on an interval (dim=1) or rectangle (dim=2).

    Flat storage is row-major with axis 0 varying slowest; this is fixed so
    binary checkpoints are bit-reproducible.
    """

    dim: int
    cells: tuple[int, ...]
    lengths: tuple[float, ...]
    spacing: tuple[float, ...]
    cell_volume: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def volume(self) -> float:
        """Total measure of the domain."""
        return float(np.prod(self.lengths))

    def axis_centers(self, axis: int) -> np.ndarray:
        """Coordinates of cell centers along one axis."""
        h = self.spacing[axis]
        return (np.arange(self.cells[axis]) + 0.5) * h

    def meshgrid(self) -> tuple[np.ndarray, ...]:
        axes = [self.axis_centers(a) for a in range(self.dim)]
        return tuple(np.meshgrid(*axes, indexing="ij"))


def make_grid(dim: int, cells: Sequence[int], lengths: Sequence[float]) -> Grid:
    if dim not in (1, 2):
        raise GridError(f"dim must be 1 or 2, got {dim}")
    if len(cells) != dim or len(lengths) != dim:
        raise GridError(
            f"cells and lengths must each have {dim} entries, "
            f"got {len(cells)} and {len(lengths)}"
        )
    cells_t = tuple(int(n) for n in cells)
    lengths_t = tuple(float(L) for L in lengths)
    for n in cells_t:
        if n < 2:
            raise GridError(f"cells must be >= 2 per axis, got {n}")
    for L in lengths_t:
        if not (L > 0 and math.isfinite(L)):
            raise GridError(f"lengths must be positive, got {L}")
    spacing = tuple(L / n for L, n in zip(lengths_t, cells_t))
    cell_volume = float(np.prod(spacing))
    return Grid(dim, cells_t, lengths_t, spacing, cell_volume)


class Field:
    """One real value per cell of a grid; immutable after construction."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values: np.ndarray, check: bool = True):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.shape:
            if values.size == grid.n_cells:
                values = values.reshape(grid.shape)
            else:
                raise FieldError(
                    f"field has {values.size} entries, grid expects {grid.n_cells}"
                )
        if check and not np.all(np.isfinite(values)):
            raise FieldError("field contains non-finite entries")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):
        raise AttributeError("Field is immutable")

    # -- arithmetic (pointwise, grid-checked) --------------------------------

    def _coerce(self, other) -> np.ndarray | float:
        if isinstance(other, Field):
            if other.grid is not self.grid and other.grid != self.grid:
                raise GridError("fields live on different grids")
            return other.values
        return float(other)

    def __add__(self, other):
        return Field(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return Field(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return Field(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Field(self.grid, self.values / self._coerce(other))

    def __neg__(self):
        return Field(self.grid, -self.values)

    def __repr__(self):
        return f"Field(grid={self.grid.cells}, min={self.values.min():.4g}, max={self.values.max():.4g})"


FieldLike = Union[Field, float, int]


def constant_field(grid: Grid, value: float) -> Field:
    return Field(grid, np.full(grid.shape, float(value)))


def field_from_function(grid: Grid, fn: Callable[..., np.ndarray]) -> Field:
    """Sample ``fn(x)`` or ``fn(x, y)`` at cell centers."""
    return Field(grid, fn(*grid.meshgrid()))


def combine(fn: Callable[..., np.ndarray], *operands: FieldLike) -> Field:
    """Pointwise combination of fields and scalars via ``fn`` on raw arrays.

    All field operands must share one grid.
    """
    grid = None
    raw = []
    for op in operands:
        if isinstance(op, Field):
            if grid is None:
                grid = op.grid
            elif op.grid != grid:
                raise GridError("fields live on different grids")
            raw.append(op.values)
        else:
            raw.append(float(op))
    if grid is None:
        raise GridError("combine needs at least one field operand")
    return Field(grid, fn(*raw))


@dataclass(frozen=True)
class FieldReduction:
    integral: float
    mean: float
    l1: float
    l2: float
    linf: float
    min: float


def reduce(f: Field) -> FieldReduction:
    """Midpoint-rule integral, mean, Lp norms and minimum of a field.

    Summation relies on numpy's pairwise order, which is deterministic for a
    fixed shape.
    """
    vol = f.grid.cell_volume
    vals = f.values
    integral = float(vals.sum() * vol)
    return FieldReduction(
        integral=integral,
        mean=integral / f.grid.volume,
        l1=float(np.abs(vals).sum() * vol),
        l2=float(math.sqrt((vals * vals).sum() * vol)),
        linf=float(np.abs(vals).max()),
        min=float(vals.min()),
    )


def integral(f: Field) -> float:
    return float(f.values.sum() * f.grid.cell_volume)


def mean(f: Field) -> float:
    return integral(f) / f.grid.volume


def inner(f: Field, g: Field) -> float:
    """Discrete L2 inner product (cell_volume-weighted)."""
    if f.grid != g.grid:
        raise GridError("fields live on different grids")
    return float((f.values * g.values).sum() * f.grid.cell_volume)
