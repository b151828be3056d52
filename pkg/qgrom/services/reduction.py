"""Deterministic and randomized POD of snapshot matrices."""
import logging
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.linalg import subspace_angles

from qgrom.core.config import settings
from qgrom.core.errors import InvalidArgumentError, SnapshotFormatError
from qgrom.services.snapshot_store import SnapshotMatrix
from qgrom.utils.binary_io import ArchiveReader, ArchiveWriter
from qgrom.utils.grid_fields import Field, StructuredGrid, build_grid

logger = logging.getLogger(__name__)

BASIS_MAGIC = b"QGBASE01"
_SV_FLOOR = 1e-300

MatrixLike = Union[SnapshotMatrix, np.ndarray]


@dataclass
class SvdTriple:
    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.sigma.size)


@dataclass
class ReducedBasis:
    variable: str
    modes: np.ndarray
    sigma: np.ndarray
    provenance: Dict[str, Union[str, int]] = dc_field(default_factory=lambda: {"method": "pod"})
    grid: Optional[StructuredGrid] = None
    fingerprint: str = ""

    def __post_init__(self):
        if self.modes.ndim != 2 or self.modes.shape[1] < 1:
            raise InvalidArgumentError("a reduced basis needs at least one mode")

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    def truncated(self, n_modes: int) -> "ReducedBasis":
        if not 1 <= n_modes <= self.n_modes:
            raise InvalidArgumentError(f"cannot keep {n_modes} of {self.n_modes} modes")
        return ReducedBasis(self.variable, self.modes[:, :n_modes].copy(), self.sigma[:n_modes].copy(),
                            dict(self.provenance), self.grid, self.fingerprint)

    def mode_field(self, i: int) -> Field:
        """Mode i (0-based) as a cell field."""
        if self.grid is None:
            raise InvalidArgumentError("basis carries no grid")
        if not 0 <= i < self.n_modes:
            raise InvalidArgumentError(f"mode {i} out of range for {self.n_modes} modes")
        return Field(self.grid, self.modes[:, i])


@dataclass
class CoefficientTable:
    """C = modes^T S; column j follows the snapshot matrix index map."""

    variable: str
    data: np.ndarray
    n_times: int

    @property
    def n_modes(self) -> int:
        return self.data.shape[0]

    def block(self, k: int) -> np.ndarray:
        """Coefficients of sample k, shape (N_r, N^t)."""
        return self.data[:, k * self.n_times:(k + 1) * self.n_times]


def _matrix_of(S: MatrixLike) -> np.ndarray:
    data = S.data if isinstance(S, SnapshotMatrix) else np.asarray(S, dtype=float)
    if data.ndim != 2 or data.size == 0:
        raise InvalidArgumentError("snapshot matrix must be a non-empty 2-D array")
    if not np.all(np.isfinite(data)):
        raise InvalidArgumentError("snapshot matrix has non-finite entries")
    return data


def _fix_signs(U: np.ndarray, Vt: np.ndarray):
    """Make the largest-magnitude entry of every mode positive."""
    rows = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[rows, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


def deterministic_pod(S: MatrixLike) -> SvdTriple:
    data = _matrix_of(S)
    U, sigma, Vt = np.linalg.svd(data, full_matrices=False)
    U, Vt = _fix_signs(U, Vt)
    return SvdTriple(U, sigma, Vt)


def rpod(S: MatrixLike, rank: int, p: Optional[int] = None, q: Optional[int] = None,
         seed: int = 0) -> SvdTriple:
    """Randomized SVD with Gaussian sketch, oversampling p and q subspace iterations.

    Returns rank + p approximate leading triplets. Each application of S or S^T
    is followed by a QR re-orthonormalization.
    """
    data = _matrix_of(S)
    p = settings.RPOD_OVERSAMPLE if p is None else p
    q = settings.RPOD_POWER if q is None else q
    n_rows, n_cols = data.shape
    if rank < 1 or p < 0 or q < 1:
        raise InvalidArgumentError(f"rpod needs rank >= 1, p >= 0, q >= 1 (got {rank}, {p}, {q})")
    width = rank + p
    if width > min(n_rows, n_cols):
        raise InvalidArgumentError(
            f"rank + p = {width} exceeds the matrix dimensions {n_rows} x {n_cols}"
        )

    rng = np.random.default_rng(seed)
    sketch = rng.standard_normal((n_cols, width))
    Q, _ = np.linalg.qr(data @ sketch)
    for _ in range(q):
        Z, _ = np.linalg.qr(data.T @ Q)
        Q, _ = np.linalg.qr(data @ Z)
    U_small, sigma, Vt = np.linalg.svd(Q.T @ data, full_matrices=False)
    U, Vt = _fix_signs(Q @ U_small, Vt)
    return SvdTriple(U, sigma, Vt)


def build_basis(S: SnapshotMatrix, rank: int, method: str = "rpod", p: Optional[int] = None,
                q: Optional[int] = None, seed: int = 0) -> ReducedBasis:
    start = time.perf_counter()
    if method == "pod":
        triple = deterministic_pod(S)
        provenance = {"method": "pod"}
    elif method == "rpod":
        p = settings.RPOD_OVERSAMPLE if p is None else p
        q = settings.RPOD_POWER if q is None else q
        n_max = min(S.data.shape)
        if rank + p > n_max:
            clamped = max(n_max - rank, 0)
            logger.warning(f"Oversampling p={p} clamped to {clamped} for a {S.data.shape} matrix")
            p = clamped
        triple = rpod(S, rank, p, q, seed)
        provenance = {"method": "rpod", "oversample": int(p), "power": int(q), "seed": int(seed)}
    else:
        raise InvalidArgumentError(f"unknown decomposition method '{method}'")
    if rank > triple.rank:
        raise InvalidArgumentError(f"requested {rank} modes, decomposition has {triple.rank}")
    logger.info(f"{method} of {S.variable} ({S.data.shape[0]} x {S.data.shape[1]}) "
                f"took {time.perf_counter() - start:.3f} seconds")
    return ReducedBasis(S.variable, triple.U[:, :rank].copy(), triple.sigma.copy(), provenance,
                        S.grid, S.fingerprint)


def energy_rank(sigma: Sequence[float], threshold: float) -> int:
    """Smallest N whose leading singular values hold the given fraction of their sum."""
    s = np.asarray(sigma, dtype=float)
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError(f"energy threshold must lie in (0, 1), got {threshold}")
    if s.size == 0 or np.any(s < 0) or s.sum() == 0.0:
        raise InvalidArgumentError("singular values must be non-negative and not all zero")
    cumulative = np.cumsum(s) / s.sum()
    return int(np.searchsorted(cumulative, threshold - 1e-12) + 1)


def energy_fractions(sigma: Sequence[float], n_modes: int):
    """(linear, squared) fraction retained by the first n_modes singular values."""
    s = np.asarray(sigma, dtype=float)
    if s.sum() == 0.0:
        raise InvalidArgumentError("all singular values vanish")
    n = min(n_modes, s.size)
    return float(s[:n].sum() / s.sum()), float((s[:n] ** 2).sum() / (s ** 2).sum())


def energy_table(sigmas: Dict[str, Sequence[float]], n_modes: int) -> pd.DataFrame:
    rows = []
    for variable, sigma in sigmas.items():
        linear, squared = energy_fractions(sigma, n_modes)
        rows.append({"variable": variable, "n_modes": n_modes,
                     "linear_fraction": linear, "squared_fraction": squared})
    return pd.DataFrame(rows, columns=["variable", "n_modes", "linear_fraction", "squared_fraction"])


def modal_coefficients(basis: ReducedBasis, S: MatrixLike) -> CoefficientTable:
    data = _matrix_of(S)
    if basis.modes.shape[0] != data.shape[0]:
        raise InvalidArgumentError(
            f"basis has {basis.modes.shape[0]} rows, snapshot matrix {data.shape[0]}"
        )
    n_times = S.n_times if isinstance(S, SnapshotMatrix) else data.shape[1]
    return CoefficientTable(basis.variable, basis.modes.T @ data, n_times)


def projection_error(basis: ReducedBasis, S: MatrixLike) -> float:
    """||S - V V^T S||_F / ||S||_F."""
    data = _matrix_of(S)
    norm = np.linalg.norm(data)
    if norm == 0.0:
        raise InvalidArgumentError("projection error of a zero matrix is undefined")
    residual = data - basis.modes @ (basis.modes.T @ data)
    return float(min(np.linalg.norm(residual) / norm, 1.0))


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles between the column spaces of A and B, largest first."""
    return subspace_angles(A, B)


def oversampling_study(S: MatrixLike, rank: int, ps: Iterable[int] = (0, 5, 10, 20, 50, 75), q: int = 1,
                       seeds: Iterable[int] = range(10)) -> pd.DataFrame:
    """Mean principal angle and singular-value error of rank-`rank` rpod against POD, per p."""
    data = _matrix_of(S)
    start = time.perf_counter()
    reference = deterministic_pod(data)
    pod_seconds = time.perf_counter() - start
    ref_modes = reference.U[:, :rank]
    ref_sigma = reference.sigma[:rank]
    seeds = list(seeds)

    rows = []
    for p in ps:
        if rank + p > min(data.shape):
            logger.warning(f"Skipping p={p}: rank + p exceeds {data.shape}")
            continue
        angles, errors, seconds = [], [], []
        for seed in seeds:
            t0 = time.perf_counter()
            approx = rpod(data, rank, p, q, seed)
            seconds.append(time.perf_counter() - t0)
            angles.append(float(principal_angles(ref_modes, approx.U[:, :rank]).max()))
            rel = np.abs(approx.sigma[:rank] - ref_sigma) / np.maximum(ref_sigma, _SV_FLOOR)
            errors.append(float(rel.max()))
        mean_seconds = float(np.mean(seconds))
        rows.append({"p": int(p), "mean_angle": float(np.mean(angles)),
                     "max_sv_rel_error": float(np.max(errors)), "seconds": mean_seconds,
                     "speedup": pod_seconds / mean_seconds if mean_seconds > 0 else float("inf")})
    return pd.DataFrame(rows, columns=["p", "mean_angle", "max_sv_rel_error", "seconds", "speedup"])


def write_spectrum(sigma: Sequence[float], path) -> None:
    s = np.asarray(sigma, dtype=float)
    pd.DataFrame({"index": np.arange(1, s.size + 1), "sigma": s}).to_csv(
        path, index=False, float_format="%.17g")


# --- basis archive -----------------------------------------------------------

def write_basis(basis: ReducedBasis, path) -> Path:
    prov = basis.provenance
    g = basis.grid
    writer = (
        ArchiveWriter(BASIS_MAGIC)
        .tag(basis.variable)
        .tag(basis.fingerprint, 16)
        .tag(str(prov.get("method", "pod")))
        .u64(basis.modes.shape[0], basis.n_modes, basis.sigma.size,
             int(prov.get("oversample", 0)), int(prov.get("power", 0)), int(prov.get("seed", 0)),
             g.nx if g else 0, g.ny if g else 0)
        .f64([g.x0, g.xf, g.y_lo, g.y_hi] if g else [0.0] * 4)
        .f64(basis.sigma)
        .f64(basis.modes, order="F")
    )
    return writer.write(path)


def read_basis(path) -> ReducedBasis:
    reader = ArchiveReader.open(path, BASIS_MAGIC)
    variable = reader.tag()
    fingerprint = reader.tag(16)
    method = reader.tag()
    n_cells, n_modes, n_sigma, oversample, power, seed, nx, ny = reader.u64(8)
    extents = reader.f64(4)
    sigma = reader.f64(n_sigma)
    modes = reader.f64((n_cells, n_modes), order="F")
    reader.finish()
    if method not in ("pod", "rpod"):
        raise SnapshotFormatError(f"{path}: unknown basis method '{method}'")
    provenance = {"method": method}
    if method == "rpod":
        provenance.update(oversample=oversample, power=power, seed=seed)
    grid = build_grid(nx, ny, *extents) if nx and ny else None
    return ReducedBasis(variable, modes, sigma, provenance, grid, fingerprint)
