"""Snapshot series, time averages, fluctuations and the global snapshot matrix.

Columns of a snapshot matrix are ordered parameter-major, time-minor:
sample k (0-based) at instant p sits in column j = k * N^t + p.
"""
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from qgrom.core.errors import ArtifactMismatchError, InvalidArgumentError, SnapshotFormatError
from qgrom.core.models import VARIABLES
from qgrom.utils.binary_io import ArchiveReader, ArchiveWriter
from qgrom.utils.grid_fields import Field, StructuredGrid, build_grid, field_to_csv

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"QGSNAP01"
FINGERPRINT_WIDTH = 16


@dataclass
class SnapshotSeries:
    """Sampled trajectory of one parameter sample; data[var] has shape (N^t, N_C)."""

    VARIABLES = VARIABLES

    grid: StructuredGrid
    mu: np.ndarray
    parameter_names: Tuple[str, ...]
    times: np.ndarray
    data: Dict[str, np.ndarray] = dc_field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).ravel()
        self.times = np.asarray(self.times, dtype=float).ravel()
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise InvalidArgumentError("snapshot times must be strictly increasing")
        for var, arr in self.data.items():
            if var not in VARIABLES:
                raise InvalidArgumentError(f"unknown variable '{var}'")
            if np.shape(arr) != (self.times.size, self.grid.n_cells):
                raise InvalidArgumentError(
                    f"{var} snapshots have shape {np.shape(arr)}, "
                    f"expected ({self.times.size}, {self.grid.n_cells})"
                )

    @property
    def n_times(self) -> int:
        return int(self.times.size)

    def snapshots(self, variable: str) -> np.ndarray:
        if variable not in self.data:
            raise InvalidArgumentError(f"series holds no '{variable}' snapshots")
        return self.data[variable]

    def field(self, variable: str, p: int) -> Field:
        return Field(self.grid, self.snapshots(variable)[p])


def _checked(series: SnapshotSeries, variable: str) -> np.ndarray:
    snaps = series.snapshots(variable)
    if series.n_times < 1:
        raise InvalidArgumentError("empty snapshot series")
    return snaps


def time_average(series: SnapshotSeries, variable: str) -> Field:
    return Field(series.grid, _checked(series, variable).mean(axis=0))


def fluctuation_array(series: SnapshotSeries, variable: str) -> np.ndarray:
    snaps = _checked(series, variable)
    return snaps - snaps.mean(axis=0, keepdims=True)


def fluctuations(series: SnapshotSeries, variable: str) -> List[Field]:
    return [Field(series.grid, row) for row in fluctuation_array(series, variable)]


@dataclass
class SnapshotMatrix:
    variable: str
    grid: StructuredGrid
    data: np.ndarray          # (N_C, N^s) fluctuations
    samples: np.ndarray       # (M, d)
    times: np.ndarray         # (N^t,)
    averages: np.ndarray      # (M, N_C) per-sample time averages
    parameter_names: Tuple[str, ...] = ()
    fingerprint: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim == 1:
            self.samples = self.samples.reshape(-1, 1)
        m, nt = self.samples.shape[0], np.size(self.times)
        if self.data.shape != (self.grid.n_cells, m * nt):
            raise InvalidArgumentError(
                f"matrix shape {self.data.shape} does not match N_C={self.grid.n_cells}, "
                f"M={m}, N^t={nt}"
            )
        if self.averages.shape != (m, self.grid.n_cells):
            raise InvalidArgumentError(f"averages shape {self.averages.shape} != ({m}, {self.grid.n_cells})")

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_times(self) -> int:
        return int(np.size(self.times))

    @property
    def n_snapshots(self) -> int:
        return self.data.shape[1]

    def column_index(self, k: int, p: int) -> int:
        if not (0 <= k < self.n_samples and 0 <= p < self.n_times):
            raise InvalidArgumentError(f"(k={k}, p={p}) outside {self.n_samples} x {self.n_times}")
        return k * self.n_times + p

    def split(self, j: int) -> Tuple[int, int]:
        if not 0 <= j < self.n_snapshots:
            raise InvalidArgumentError(f"column {j} outside 0..{self.n_snapshots - 1}")
        return divmod(j, self.n_times)

    def block(self, k: int) -> np.ndarray:
        """Columns belonging to sample k, shape (N_C, N^t)."""
        start = self.column_index(k, 0)
        return self.data[:, start:start + self.n_times]

    def column_field(self, j: int) -> Field:
        self.split(j)
        return Field(self.grid, self.data[:, j])

    def average_field(self, k: int) -> Field:
        return Field(self.grid, self.averages[k])


def assemble_matrix(all_series: Sequence[SnapshotSeries], variable: str,
                    fingerprint: str = "") -> SnapshotMatrix:
    if not all_series:
        raise InvalidArgumentError("no snapshot series to assemble")
    grid, n_times = all_series[0].grid, all_series[0].n_times
    for k, s in enumerate(all_series):
        if s.grid != grid:
            raise InvalidArgumentError(f"series {k} lives on a different grid")
        if s.n_times != n_times:
            raise InvalidArgumentError(f"series {k} has {s.n_times} instants, expected {n_times}")
    if n_times < 1:
        raise InvalidArgumentError("snapshot series are empty")

    blocks = [fluctuation_array(s, variable).T for s in all_series]
    data = np.ascontiguousarray(np.hstack(blocks))
    averages = np.vstack([time_average(s, variable).values for s in all_series])
    samples = np.vstack([s.mu.reshape(1, -1) for s in all_series])
    logger.info(f"Assembled {variable} snapshot matrix {data.shape[0]} x {data.shape[1]}")
    return SnapshotMatrix(
        variable=variable, grid=grid, data=data, samples=samples, times=all_series[0].times.copy(),
        averages=averages, parameter_names=tuple(all_series[0].parameter_names), fingerprint=fingerprint,
    )


# --- binary archive ----------------------------------------------------------

def write_snapshots(matrix: SnapshotMatrix, path) -> Path:
    g = matrix.grid
    d = matrix.samples.shape[1]
    writer = (
        ArchiveWriter(SNAPSHOT_MAGIC)
        .tag(matrix.variable)
        .tag(matrix.fingerprint, FINGERPRINT_WIDTH)
        .u64(g.n_cells, matrix.n_snapshots, d, matrix.n_samples, matrix.n_times, g.nx, g.ny)
        .f64([g.x0, g.xf, g.y_lo, g.y_hi])
    )
    for name in matrix.parameter_names:
        writer.tag(name)
    writer.f64(matrix.samples).f64(matrix.times).f64(matrix.averages).f64(matrix.data, order="F")
    path = writer.write(path)
    logger.info(f"Wrote {matrix.variable} snapshots to {path}")
    return path


def read_snapshots(path) -> SnapshotMatrix:
    reader = ArchiveReader.open(path, SNAPSHOT_MAGIC)
    variable = reader.tag()
    if variable not in VARIABLES:
        raise SnapshotFormatError(f"{path}: unknown variable tag '{variable}'")
    fingerprint = reader.tag(FINGERPRINT_WIDTH)
    n_cells, n_snap, d, m, nt, nx, ny = reader.u64(7)
    if nx * ny != n_cells or m * nt != n_snap:
        raise SnapshotFormatError(f"{path}: inconsistent header dimensions")
    x0, xf, y_lo, y_hi = reader.f64(4)
    names = tuple(reader.tag() for _ in range(d))
    samples = reader.f64((m, d))
    times = reader.f64(nt)
    averages = reader.f64((m, n_cells))
    data = reader.f64((n_cells, n_snap), order="F")
    reader.finish()
    return SnapshotMatrix(
        variable=variable, grid=build_grid(nx, ny, x0, xf, y_lo, y_hi), data=data, samples=samples,
        times=times, averages=averages, parameter_names=names, fingerprint=fingerprint,
    )


# --- per-sample series cache ---------------------------------------------------

def save_series(series: SnapshotSeries, path, fingerprint: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = series.grid
    tmp = path.with_name(path.stem + ".tmp.npz")
    np.savez(
        tmp,
        fingerprint=np.array(fingerprint),
        grid=np.array([g.nx, g.ny, g.x0, g.xf, g.y_lo, g.y_hi], dtype=float),
        mu=series.mu,
        parameter_names=np.array(series.parameter_names, dtype=str),
        times=series.times,
        **{var: arr for var, arr in series.data.items()},
    )
    tmp.replace(path)
    return path


def load_series(path, fingerprint: Optional[str] = None) -> SnapshotSeries:
    with np.load(path, allow_pickle=False) as archive:
        stored = str(archive["fingerprint"])
        if fingerprint is not None and stored != fingerprint:
            raise ArtifactMismatchError(
                f"{path}: cached series belongs to sweep {stored}, current sweep is {fingerprint}"
            )
        nx, ny, x0, xf, y_lo, y_hi = archive["grid"]
        return SnapshotSeries(
            grid=build_grid(int(nx), int(ny), x0, xf, y_lo, y_hi),
            mu=archive["mu"],
            parameter_names=tuple(str(n) for n in archive["parameter_names"]),
            times=archive["times"],
            data={var: archive[var] for var in VARIABLES if var in archive.files},
        )


def export_column(matrix: SnapshotMatrix, j: int, path) -> None:
    field_to_csv(matrix.column_field(j), path)


def export_average(matrix: SnapshotMatrix, k: int, path) -> None:
    field_to_csv(matrix.average_field(k), path)
