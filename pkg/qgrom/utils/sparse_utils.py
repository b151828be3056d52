"""Five-point stencil algebra and the Krylov solve used by every implicit step."""
import logging
from dataclasses import dataclass, field as dc_field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from qgrom.core.config import settings
from qgrom.core.errors import InvalidArgumentError, SolverConvergenceError
from qgrom.utils.grid_fields import Field, StructuredGrid

logger = logging.getLogger(__name__)

_DIRECTIONS = ("center", "east", "west", "north", "south")
_RESTARTS = 3


@dataclass
class Stencil:
    """Linear cell operator  (L q)_P = c q_P + e q_E + w q_W + n q_N + s q_S + bc_P.

    Coefficient arrays have the grid shape (ny, nx). Couplings across the
    domain boundary are zero; boundary data enters through ``bc``.
    """

    grid: StructuredGrid
    center: np.ndarray
    east: np.ndarray
    west: np.ndarray
    north: np.ndarray
    south: np.ndarray
    bc: np.ndarray

    @classmethod
    def zero(cls, grid: StructuredGrid) -> "Stencil":
        return cls(grid, *(np.zeros(grid.shape) for _ in range(6)))

    @classmethod
    def identity(cls, grid: StructuredGrid, scale: float = 1.0) -> "Stencil":
        stencil = cls.zero(grid)
        stencil.center[:] = scale
        return stencil

    def _combine(self, other: "Stencil", sign: float) -> "Stencil":
        return Stencil(
            self.grid,
            *(getattr(self, d) + sign * getattr(other, d) for d in _DIRECTIONS),
            self.bc + sign * other.bc,
        )

    def __add__(self, other: "Stencil") -> "Stencil":
        return self._combine(other, 1.0)

    def __sub__(self, other: "Stencil") -> "Stencil":
        return self._combine(other, -1.0)

    def __mul__(self, scale: float) -> "Stencil":
        return Stencil(self.grid, *(getattr(self, d) * scale for d in _DIRECTIONS), self.bc * scale)

    __rmul__ = __mul__

    def apply(self, values: np.ndarray, with_bc: bool = True) -> np.ndarray:
        q = np.asarray(values, dtype=float).reshape(self.grid.shape)
        out = self.center * q
        out[:, :-1] += self.east[:, :-1] * q[:, 1:]
        out[:, 1:] += self.west[:, 1:] * q[:, :-1]
        out[:-1, :] += self.north[:-1, :] * q[1:, :]
        out[1:, :] += self.south[1:, :] * q[:-1, :]
        if with_bc:
            out = out + self.bc
        return out.ravel()

    def system(self, rhs: np.ndarray) -> "SparseSystem":
        """System  L_matrix q = rhs - bc  for the equation  L q = rhs."""
        return SparseSystem(
            grid=self.grid,
            center=self.center.ravel().copy(),
            east=self.east.ravel().copy(),
            west=self.west.ravel().copy(),
            north=self.north.ravel().copy(),
            south=self.south.ravel().copy(),
            rhs=np.asarray(rhs, dtype=float).ravel() - self.bc.ravel(),
        )


def diffusion_stencil(grid: StructuredGrid, kx: np.ndarray, ky: np.ndarray,
                      boundary: Optional[dict] = None) -> Stencil:
    """Discrete  div(k grad q)  with Dirichlet data on every boundary face.

    kx holds face coefficients on x-faces, shape (ny, nx+1); ky on y-faces,
    shape (ny+1, nx). ``boundary`` maps west/east/south/north to face values
    (default zero). Boundary faces use the half-cell distance to the wall.
    """
    boundary = boundary or {}
    tx = np.asarray(kx, dtype=float) / grid.hx ** 2
    ty = np.asarray(ky, dtype=float) / grid.hy ** 2
    east = tx[:, 1:].copy()
    west = tx[:, :-1].copy()
    north = ty[1:, :].copy()
    south = ty[:-1, :].copy()
    center = -(east + west + north + south)
    bc = np.zeros(grid.shape)

    g = {side: np.asarray(boundary.get(side, 0.0), dtype=float) for side in ("west", "east", "south", "north")}
    center[:, -1] -= east[:, -1]
    bc[:, -1] += 2.0 * east[:, -1] * g["east"]
    east[:, -1] = 0.0
    center[:, 0] -= west[:, 0]
    bc[:, 0] += 2.0 * west[:, 0] * g["west"]
    west[:, 0] = 0.0
    center[-1, :] -= north[-1, :]
    bc[-1, :] += 2.0 * north[-1, :] * g["north"]
    north[-1, :] = 0.0
    center[0, :] -= south[0, :]
    bc[0, :] += 2.0 * south[0, :] * g["south"]
    south[0, :] = 0.0
    return Stencil(grid, center, east, west, north, south, bc)


def laplacian_stencil(grid: StructuredGrid, boundary: Optional[dict] = None) -> Stencil:
    return diffusion_stencil(grid, np.ones((grid.ny, grid.nx + 1)), np.ones((grid.ny + 1, grid.nx)), boundary)


@dataclass
class SparseSystem:
    """Per-cell five-point stencil in flat storage order plus right-hand side."""

    grid: StructuredGrid
    center: np.ndarray
    east: np.ndarray
    west: np.ndarray
    north: np.ndarray
    south: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        n = self.grid.n_cells
        for name in _DIRECTIONS + ("rhs",):
            if np.shape(getattr(self, name)) != (n,):
                raise InvalidArgumentError(f"stencil array '{name}' must have {n} entries")
        coeffs = np.concatenate([getattr(self, d) for d in _DIRECTIONS])
        if not np.all(np.isfinite(coeffs)):
            raise InvalidArgumentError("stencil coefficients must be finite")
        if np.any(self.center == 0.0):
            raise InvalidArgumentError("center coefficient vanishes on some row")

    def matrix(self) -> sp.csr_matrix:
        nx, n = self.grid.nx, self.grid.n_cells
        diagonals = [self.center, self.east[:-1], self.west[1:], self.north[:-nx], self.south[nx:]]
        return sp.diags(diagonals, [0, 1, -1, nx, -nx], shape=(n, n), format="csr")


@dataclass
class SolveResult:
    field: Field
    residuals: List[float] = dc_field(default_factory=list)

    @property
    def iterations(self) -> int:
        return max(len(self.residuals) - 1, 0)


def sparse_solve(system: SparseSystem, tol: Optional[float] = None, max_iter: Optional[int] = None,
                 x0: Optional[np.ndarray] = None) -> SolveResult:
    """Preconditioned BiCGStab to relative residual ||Ax - b|| / ||b|| <= tol.

    The residual history starts with the initial residual. A zero right-hand
    side returns the zero field without iterating.
    """
    tol = settings.SOLVER_TOL if tol is None else tol
    if tol <= 0:
        raise InvalidArgumentError(f"tolerance must be positive, got {tol}")
    n = system.grid.n_cells
    max_iter = settings.SOLVER_MAX_ITER_FACTOR * n if max_iter is None else max_iter

    b = system.rhs
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return SolveResult(Field(system.grid, np.zeros(n)), [0.0])

    A = system.matrix()
    x_start = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel()
    residuals = [float(np.linalg.norm(b - A @ x_start)) / b_norm]
    if residuals[0] <= tol:
        return SolveResult(Field(system.grid, x_start), residuals)

    precond = None
    try:
        ilu = spla.spilu(A.tocsc())
        precond = spla.LinearOperator(A.shape, ilu.solve)
    except RuntimeError:
        logger.warning("ILU factorization failed; solving without preconditioner")

    def record(xk):
        residuals.append(float(np.linalg.norm(b - A @ xk)) / b_norm)

    x, final, info = x_start, residuals[0], 0
    # BiCGStab tracks a recurrence residual; restart from the iterate when the
    # true residual still misses the tolerance.
    for _ in range(_RESTARTS):
        budget = max_iter - (len(residuals) - 1)
        if budget <= 0:
            info = 1
            break
        x, info = spla.bicgstab(A, b, x0=x, rtol=tol, atol=0.0, maxiter=budget, M=precond, callback=record)
        if not np.all(np.isfinite(x)):
            break
        final = float(np.linalg.norm(b - A @ x)) / b_norm
        if info != 0 or final <= tol:
            break
    if info != 0 or not np.all(np.isfinite(x)) or final > tol:
        logger.error(f"BiCGStab stopped with info={info}, relative residual {final:.3e} (tol {tol:.1e})")
        raise SolverConvergenceError(
            f"linear solve did not converge: relative residual {final:.3e} > {tol:.1e} "
            f"after {len(residuals) - 1} iterations",
            residuals + [final],
        )
    if residuals[-1] != final:
        residuals.append(final)
    return SolveResult(Field(system.grid, x), residuals)
