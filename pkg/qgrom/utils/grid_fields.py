"""Structured finite-volume grid, cell fields and discrete norms.

Cells are stored row-major with the x-index fastest: cell (i, j) has flat
index k = j * nx + i, and ``values.reshape(ny, nx)[j, i]`` addresses it.
"""
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import pandas as pd

from qgrom.core.errors import FieldEvaluationError, InvalidArgumentError


@dataclass(frozen=True)
class StructuredGrid:
    nx: int
    ny: int
    x0: float
    xf: float
    y_lo: float
    y_hi: float

    @property
    def hx(self) -> float:
        return (self.xf - self.x0) / self.nx

    @property
    def hy(self) -> float:
        return (self.y_hi - self.y_lo) / self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def shape(self) -> Tuple[int, int]:
        """Array shape (ny, nx) of a reshaped field."""
        return (self.ny, self.nx)

    def cell_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def cell_center(self, i: int, j: int) -> Tuple[float, float]:
        return (self.x0 + (i + 0.5) * self.hx, self.y_lo + (j + 0.5) * self.hy)

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flat arrays of cell-center coordinates in storage order."""
        xc = self.x0 + (np.arange(self.nx) + 0.5) * self.hx
        yc = self.y_lo + (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(xc, yc, indexing="xy")
        return X.ravel(), Y.ravel()

    def boundary_centers(self):
        """Face centers of the west, east, south and north boundaries."""
        xc = self.x0 + (np.arange(self.nx) + 0.5) * self.hx
        yc = self.y_lo + (np.arange(self.ny) + 0.5) * self.hy
        return {
            "west": (np.full(self.ny, self.x0), yc),
            "east": (np.full(self.ny, self.xf), yc),
            "south": (xc, np.full(self.nx, self.y_lo)),
            "north": (xc, np.full(self.nx, self.y_hi)),
        }


@dataclass(frozen=True)
class Field:
    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n_cells,):
            raise InvalidArgumentError(
                f"field has {values.size} values, grid has {self.grid.n_cells} cells"
            )
        _require_finite(self.grid, values, "field")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def __add__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values + _values_of(other))

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values - _values_of(other))

    def __mul__(self, scale: float) -> "Field":
        return Field(self.grid, self.values * float(scale))

    __rmul__ = __mul__


def _require_finite(grid: StructuredGrid, values: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        k = int(bad[0])
        i, j = k % grid.nx, k // grid.nx
        raise FieldEvaluationError(
            f"{what} is not finite at cell {k} (i={i}, j={j}, center={grid.cell_center(i, j)})",
            cell=k,
        )


def _values_of(other) -> np.ndarray:
    return other.values if isinstance(other, Field) else np.asarray(other, dtype=float)


def build_grid(nx: int, ny: int, x0: float, xf: float, y_lo: float, y_hi: float) -> StructuredGrid:
    if nx < 2 or ny < 2:
        raise InvalidArgumentError(f"grid needs at least 2 cells per direction, got {nx}x{ny}")
    if not xf > x0 or not y_hi > y_lo:
        raise InvalidArgumentError(
            f"non-positive domain extent: x in [{x0}, {xf}], y in [{y_lo}, {y_hi}]"
        )
    return StructuredGrid(int(nx), int(ny), float(x0), float(xf), float(y_lo), float(y_hi))


def grid_from_config(config) -> StructuredGrid:
    return build_grid(config.nx, config.ny, config.x0, config.xf, config.y_lo, config.y_hi)


def zeros(grid: StructuredGrid) -> Field:
    return Field(grid, np.zeros(grid.n_cells))


def eval_on_cells(grid: StructuredGrid, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Field:
    """Sample f at every cell center; f receives coordinate arrays."""
    x, y = grid.centers()
    values = np.broadcast_to(np.asarray(f(x, y), dtype=float), x.shape).copy()
    _require_finite(grid, values, "function")
    return Field(grid, values)


def l2_norm(field: Field) -> float:
    """Cell-area weighted discrete L2 norm (midpoint quadrature)."""
    return float(np.sqrt(np.sum(field.values ** 2) * field.grid.cell_area))


def field_to_csv(field: Field, path) -> None:
    x, y = field.grid.centers()
    frame = pd.DataFrame({"x": x, "y": y, "value": field.values})
    frame.to_csv(path, index=False, float_format="%.17g")
