"""Two-layer quasi-geostrophic solver with nonlinear Helmholtz filtering.

One time step runs the segregated sequence
    q1 (implicit transport) -> filter q1 -> psi1 -> q2 (implicit transport, uses psi1^{n+1})
    -> filter q2 -> psi2
with first-order backward differences in time and a cell-centered
finite-volume discretization on a uniform rectangular grid. Potential
vorticity and its filtered version carry the Dirichlet data q = y, the
stream functions vanish on the boundary.
"""
import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from qgrom.core.config import settings
from qgrom.core.errors import (
    FieldEvaluationError,
    InvalidArgumentError,
    NumericalError,
    SimulationBlowUpError,
    StepError,
)
from qgrom.core.models import PhysParams, SimulationConfig
from qgrom.services.snapshot_store import SnapshotSeries
from qgrom.utils.grid_fields import Field, StructuredGrid, eval_on_cells, grid_from_config, zeros
from qgrom.utils.sparse_utils import Stencil, diffusion_stencil, laplacian_stencil, sparse_solve

logger = logging.getLogger(__name__)

GRADIENT_FLOOR = 1e-14


@dataclass(frozen=True)
class LayerState:
    q1: Field
    q2: Field
    qbar1: Field
    qbar2: Field
    psi1: Field
    psi2: Field
    t: float = 0.0
    step: int = 0

    def q(self, layer: int) -> Field:
        return self.q1 if layer == 1 else self.q2

    def psi(self, layer: int) -> Field:
        return self.psi1 if layer == 1 else self.psi2


@dataclass(frozen=True)
class FaceFluxes:
    """Signed volumetric fluxes: ``fx`` through x-faces in +x, shape (ny, nx+1);
    ``fy`` through y-faces in +y, shape (ny+1, nx)."""

    grid: StructuredGrid
    fx: np.ndarray
    fy: np.ndarray

    def net_outflow(self) -> np.ndarray:
        return (self.fx[:, 1:] - self.fx[:, :-1] + self.fy[1:, :] - self.fy[:-1, :]).ravel()


@dataclass
class SimulationResult:
    series: SnapshotSeries
    wall_seconds: float
    n_steps: int
    final_state: LayerState


def munk_scale(params: PhysParams, length: float = 1.0) -> float:
    return length * (params.Ro / params.Re) ** (1.0 / 3.0)


def regime(grid: StructuredGrid, params: PhysParams) -> str:
    """'stabilized regime' when the mesh does not resolve the Munk layer."""
    return "stabilized regime" if grid.hx > munk_scale(params, grid.xf - grid.x0) else "DNS regime"


def forcing_field(grid: StructuredGrid, params: PhysParams) -> Field:
    if params.forcing.kind == "none" or params.forcing.amplitude == 0.0:
        return zeros(grid)
    amplitude = params.forcing.amplitude
    return eval_on_cells(grid, lambda x, y: amplitude * np.sin(np.pi * y))


def rest_state(grid: StructuredGrid) -> LayerState:
    """q_l = y, psi_l = 0 at t = 0."""
    y = eval_on_cells(grid, lambda x, y: y)
    psi = zeros(grid)
    return LayerState(q1=y, q2=y, qbar1=y, qbar2=y, psi1=psi, psi2=psi, t=0.0, step=0)


def _on_steps(value: float, dt: float, what: str) -> int:
    n = int(round(value / dt))
    if abs(n * dt - value) > 1e-12 * max(abs(value), dt):
        raise InvalidArgumentError(f"{what} = {value} is not an integer multiple of dt = {dt}")
    return n


class QGSolver:
    def __init__(self, grid: StructuredGrid, tol: Optional[float] = None, max_iter: Optional[int] = None,
                 progress_every: Optional[int] = None):
        self.grid = grid
        self.tol = settings.SOLVER_TOL if tol is None else tol
        self.max_iter = max_iter or settings.SOLVER_MAX_ITER_FACTOR * grid.n_cells
        self.progress_every = progress_every or settings.PROGRESS_EVERY
        self._y = eval_on_cells(grid, lambda x, y: y)
        self._y_boundary = {side: yf for side, (xf, yf) in grid.boundary_centers().items()}
        self._laplacian0 = laplacian_stencil(grid)
        self._laplacian_y = laplacian_stencil(grid, self._y_boundary)
        self._forcing_cache = {}

    @classmethod
    def from_config(cls, config: SimulationConfig) -> "QGSolver":
        grid = grid_from_config(config.grid)
        return cls(grid, tol=config.solver.tol, max_iter=config.solver.max_iter_factor * grid.n_cells,
                   progress_every=config.solver.progress_every)

    # --- discrete operators ------------------------------------------------

    def laplacian(self, field: Field) -> Field:
        """Five-point Laplacian of a field that vanishes on the boundary."""
        return Field(self.grid, self._laplacian0.apply(field.values))

    def indicator(self, q: Field) -> Field:
        """a(q) = |grad q| / max |grad q| from centered cell gradients."""
        arr = q.as_array()
        edge_order = 2 if min(self.grid.nx, self.grid.ny) >= 3 else 1
        gy, gx = np.gradient(arr, self.grid.hy, self.grid.hx, edge_order=edge_order)
        magnitude = np.hypot(gx, gy)
        peak = float(magnitude.max())
        if peak < GRADIENT_FLOOR:
            return zeros(self.grid)
        return Field(self.grid, np.clip(magnitude / peak, 0.0, 1.0).ravel())

    def face_fluxes(self, psi: Field) -> FaceFluxes:
        """Fluxes of curl(0, 0, psi) from vertex values of psi.

        Interior vertices average the four adjacent cells, boundary vertices
        carry psi = 0, so each cell's outflow telescopes to zero.
        """
        arr = psi.as_array()
        ny, nx = self.grid.shape
        vertex = np.zeros((ny + 1, nx + 1))
        vertex[1:-1, 1:-1] = 0.25 * (arr[:-1, :-1] + arr[1:, :-1] + arr[:-1, 1:] + arr[1:, 1:])
        fx = vertex[1:, :] - vertex[:-1, :]
        fy = -(vertex[:, 1:] - vertex[:, :-1])
        return FaceFluxes(self.grid, fx, fy)

    def advection_stencil(self, fluxes: FaceFluxes, boundary: Optional[dict] = None) -> Stencil:
        """(1/|cell|) sum_faces phi_out * q_face with central face interpolation."""
        boundary = boundary or {}
        half = 0.5 / self.grid.cell_area
        east = half * fluxes.fx[:, 1:]
        west = -half * fluxes.fx[:, :-1]
        north = half * fluxes.fy[1:, :]
        south = -half * fluxes.fy[:-1, :]
        center = east + west + north + south
        bc = np.zeros(self.grid.shape)
        g = {side: np.asarray(boundary.get(side, 0.0), dtype=float) for side in ("west", "east", "south", "north")}
        # boundary faces take the Dirichlet value instead of a neighbor average
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
        return Stencil(self.grid, center, east, west, north, south, bc)

    def transport_stencil(self, psi: Field, reynolds: float, dt: Optional[float] = None,
                          boundary: Optional[dict] = None) -> Stencil:
        """(1/dt) q - div(curl(Psi) q) - (1/Re) lap q; steady when dt is None."""
        boundary = self._y_boundary if boundary is None else boundary
        advection = self.advection_stencil(self.face_fluxes(psi), boundary)
        diffusion = self._laplacian_y if boundary is self._y_boundary else laplacian_stencil(self.grid, boundary)
        operator = advection * -1.0 - diffusion * (1.0 / reynolds)
        if dt is not None:
            operator = operator + Stencil.identity(self.grid, 1.0 / dt)
        return operator

    def filter_stencil(self, q: Field, alpha: float) -> Stencil:
        a = self.indicator(q).as_array()
        ny, nx = self.grid.shape
        kx = np.empty((ny, nx + 1))
        kx[:, 1:-1] = 0.5 * (a[:, :-1] + a[:, 1:])
        kx[:, 0], kx[:, -1] = a[:, 0], a[:, -1]
        ky = np.empty((ny + 1, nx))
        ky[1:-1, :] = 0.5 * (a[:-1, :] + a[1:, :])
        ky[0, :], ky[-1, :] = a[0, :], a[-1, :]
        diffusion = diffusion_stencil(self.grid, kx, ky, self._y_boundary)
        return Stencil.identity(self.grid) - diffusion * alpha ** 2

    def forcing(self, params: PhysParams) -> Field:
        key = (params.forcing.kind, params.forcing.amplitude)
        if key not in self._forcing_cache:
            self._forcing_cache[key] = forcing_field(self.grid, params)
        return self._forcing_cache[key]

    # --- segregated scheme -------------------------------------------------

    def advance_vorticity(self, layer: int, state: LayerState, params: PhysParams, dt: float) -> Field:
        """Implicit BDF1 transport step for q_layer; layer 2 expects psi1 at the new level."""
        if dt <= 0:
            raise InvalidArgumentError(f"time step must be positive, got {dt}")
        if layer not in (1, 2):
            raise InvalidArgumentError(f"layer must be 1 or 2, got {layer}")
        q_old = state.q(layer)
        lap = self._laplacian0.apply
        if layer == 1:
            coupling = params.Fr / (params.Re * params.delta)
            rhs = (self.forcing(params).values + q_old.values / dt
                   - coupling * lap(state.psi2.values - state.psi1.values))
        else:
            coupling = params.Fr / (params.Re * (1.0 - params.delta))
            rhs = (q_old.values / dt - params.sigma * lap(state.psi2.values)
                   - coupling * lap(state.psi1.values - state.psi2.values))
        operator = self.transport_stencil(state.psi(layer), params.Re, dt)
        return sparse_solve(operator.system(rhs), self.tol, self.max_iter, x0=q_old.values).field

    def apply_filter(self, q: Field, alpha: float) -> Field:
        """Solve -alpha^2 div(a(q) grad qbar) + qbar = q with qbar = y on the boundary."""
        if alpha < 0:
            raise InvalidArgumentError(f"filter radius must be non-negative, got {alpha}")
        if alpha == 0.0:
            return Field(self.grid, q.values)
        operator = self.filter_stencil(q, alpha)
        return sparse_solve(operator.system(q.values), self.tol, self.max_iter, x0=q.values).field

    def solve_stream(self, layer: int, qbar: Field, psi_other: Field, params: PhysParams,
                     x0: Optional[Field] = None) -> Field:
        """Solve Ro lap psi - (Fr/delta_l) psi = qbar - y - (Fr/delta_l) psi_other, psi = 0 on the boundary."""
        if layer not in (1, 2):
            raise InvalidArgumentError(f"layer must be 1 or 2, got {layer}")
        depth = params.delta if layer == 1 else 1.0 - params.delta
        coupling = params.Fr / depth
        operator = self._laplacian0 * params.Ro - Stencil.identity(self.grid, coupling)
        rhs = qbar.values - self._y.values - coupling * psi_other.values
        guess = None if x0 is None else x0.values
        return sparse_solve(operator.system(rhs), self.tol, self.max_iter, x0=guess).field

    def step(self, state: LayerState, params: PhysParams, dt: float) -> LayerState:
        n = state.step + 1
        stage = "advance_vorticity(1)"
        try:
            q1 = self.advance_vorticity(1, state, params, dt)
            stage = "apply_filter(1)"
            qbar1 = self.apply_filter(q1, params.alpha1)
            stage = "solve_stream(1)"
            psi1 = self.solve_stream(1, qbar1, state.psi2, params, x0=state.psi1)
            stage = "advance_vorticity(2)"
            q2 = self.advance_vorticity(2, replace(state, psi1=psi1), params, dt)
            stage = "apply_filter(2)"
            qbar2 = self.apply_filter(q2, params.alpha2)
            stage = "solve_stream(2)"
            psi2 = self.solve_stream(2, qbar2, psi1, params, x0=state.psi2)
        except NumericalError as e:
            logger.error(f"Step {n} failed in {stage}: {e}")
            raise StepError(f"step {n} failed in {stage}: {e}", step=n, operation=stage) from e
        except FieldEvaluationError as e:
            logger.error(f"Non-finite field at t={n * dt:.6g} (step {n}, {stage})")
            raise SimulationBlowUpError(f"simulation blew up at t={n * dt:.6g} in {stage}", time=n * dt, step=n) from e
        return LayerState(q1=q1, q2=q2, qbar1=qbar1, qbar2=qbar2, psi1=psi1, psi2=psi2,
                          t=n * dt, step=n)

    def run_simulation(self, params: PhysParams, dt: float, t_end: float, snapshot_stride: float,
                       window_start: float = 0.0, sink: Optional[Callable[[float, LayerState], None]] = None,
                       mu=None, parameter_names=()) -> SimulationResult:
        """Integrate from rest to t_end, sampling every snapshot_stride from window_start on."""
        if dt <= 0:
            raise InvalidArgumentError(f"time step must be positive, got {dt}")
        if t_end < 0:
            raise InvalidArgumentError(f"t_end must be non-negative, got {t_end}")
        n_stride = _on_steps(snapshot_stride, dt, "snapshot_stride")
        if n_stride < 1:
            raise InvalidArgumentError("snapshot_stride must be at least one time step")
        n_start = _on_steps(window_start, dt, "window_start")
        n_end = int(np.floor(t_end / dt + 1e-9))

        delta_m = munk_scale(params, self.grid.xf - self.grid.x0)
        logger.info(f"Munk scale {delta_m:.5f} vs h = {self.grid.hx:.5f}: {regime(self.grid, params)}")
        if n_end < n_start:
            logger.warning(f"t_end = {t_end} precedes the snapshot window start {window_start}; no snapshots")

        collected_t, collected = [], {v: [] for v in SnapshotSeries.VARIABLES}

        def emit(s: LayerState):
            collected_t.append(s.t)
            for var in SnapshotSeries.VARIABLES:
                collected[var].append(np.array(getattr(s, var).values))
            if sink is not None:
                sink(s.t, s)

        state = rest_state(self.grid)
        start = time.perf_counter()
        if n_start == 0:
            emit(state)
        for n in range(1, n_end + 1):
            state = self.step(state, params, dt)
            if n >= n_start and (n - n_start) % n_stride == 0:
                emit(state)
            if n % self.progress_every == 0:
                logger.info(f"t={state.t:.6g} step={n} wall={time.perf_counter() - start:.3f}")
        wall = time.perf_counter() - start
        logger.info(f"Simulation finished: {n_end} steps, {len(collected_t)} snapshots in {wall:.2f} seconds")

        n_cells = self.grid.n_cells
        series = SnapshotSeries(
            grid=self.grid,
            mu=np.asarray([] if mu is None else mu, dtype=float),
            parameter_names=tuple(parameter_names),
            times=np.asarray(collected_t, dtype=float),
            data={v: np.asarray(collected[v], dtype=float).reshape(len(collected_t), n_cells)
                  for v in SnapshotSeries.VARIABLES},
        )
        return SimulationResult(series=series, wall_seconds=wall, n_steps=n_end, final_state=state)


def simulate(config: SimulationConfig, mu=None, parameter_names=(), sink=None) -> SimulationResult:
    solver = QGSolver.from_config(config)
    return solver.run_simulation(config.params, config.dt, config.t_end, config.stride,
                                 window_start=config.window_start, sink=sink, mu=mu,
                                 parameter_names=parameter_names)
