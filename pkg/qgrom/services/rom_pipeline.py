"""Offline (sweep, reduction, training) and online (reconstruction, evaluation) phases."""
import json
import logging
import time
from dataclasses import dataclass, field as dc_field
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from qgrom.core.config import settings
from qgrom.core.errors import (
    ArtifactIncompleteError,
    ArtifactMismatchError,
    InvalidArgumentError,
    PipelineStageError,
)
from qgrom.core.models import VARIABLES, LstmConfig, RpodConfig, SweepPlan
from qgrom.services import lstm_forecaster, reduction, snapshot_store
from qgrom.services.lstm_forecaster import LstmModel
from qgrom.services.qg_solver import simulate
from qgrom.services.reduction import CoefficientTable, ReducedBasis
from qgrom.services.snapshot_store import SnapshotSeries
from qgrom.utils.grid_fields import Field, StructuredGrid, grid_from_config, l2_norm

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


@dataclass
class RomArtifacts:
    plan: SweepPlan
    fingerprint: str
    grid: StructuredGrid
    samples: np.ndarray
    times: np.ndarray
    bases: Dict[str, ReducedBasis] = dc_field(default_factory=dict)
    averages: Dict[str, np.ndarray] = dc_field(default_factory=dict)
    coefficients: Dict[str, CoefficientTable] = dc_field(default_factory=dict)
    models: Dict[str, LstmModel] = dc_field(default_factory=dict)
    directory: Optional[Path] = None

    @property
    def parameter_names(self) -> Tuple[str, ...]:
        return self.plan.parameter_names

    def require(self, variable: str, need_model: bool = True) -> None:
        missing = [name for name, store in (("basis", self.bases), ("time averages", self.averages),
                                            ("coefficients", self.coefficients))
                   if variable not in store]
        if need_model and variable not in self.models:
            missing.append("LSTM model")
        if missing:
            raise ArtifactIncompleteError(f"artifacts for {variable} lack: {', '.join(missing)}")


@dataclass
class EvaluationReport:
    mu: np.ndarray
    nearest: int
    errors: Dict[str, float]
    undefined: Dict[str, bool]
    fluctuation_errors: Dict[str, float] = dc_field(default_factory=dict)

    def to_row(self, names: Sequence[str]) -> dict:
        row = {name: float(v) for name, v in zip(names, self.mu)}
        row.update({f"eps_{var}": self.errors.get(var, float("nan")) for var in VARIABLES})
        return row


# --- offline -------------------------------------------------------------------

def _run_sample(job) -> Tuple[int, SnapshotSeries]:
    k, plan, mu, cache_path = job
    result = simulate(plan.simulation_for(mu), mu=mu, parameter_names=plan.parameter_names)
    if cache_path is not None:
        snapshot_store.save_series(result.series, cache_path, plan.fingerprint())
    return k, result.series


def run_sweep(plan: SweepPlan, output_dir: Optional[Path] = None, jobs: int = 1,
              progress: bool = True) -> List[SnapshotSeries]:
    """Run (or load cached) full order simulations for every sample, in sample order."""
    fingerprint = plan.fingerprint()
    samples = plan.samples()
    cache_dir = Path(output_dir) / "series" if output_dir is not None else None
    series: List[Optional[SnapshotSeries]] = [None] * len(samples)
    pending = []
    for k, mu in enumerate(samples):
        path = cache_dir / f"sample-{k:04d}.npz" if cache_dir is not None else None
        if path is not None and path.is_file():
            series[k] = snapshot_store.load_series(path, fingerprint)
            logger.info(f"Loaded cached series for sample {k} (mu={mu.tolist()})")
        else:
            pending.append((k, plan, mu, path))

    logger.info(f"Sweep {fingerprint}: {len(samples)} samples, {len(pending)} to simulate with {jobs} job(s)")
    if jobs > 1 and len(pending) > 1:
        with Pool(jobs) as pool:
            for k, s in tqdm(pool.imap_unordered(_run_sample, pending), total=len(pending),
                             desc="Sweep", disable=not progress):
                series[k] = s
    else:
        for job in tqdm(pending, desc="Sweep", disable=not progress):
            k, s = _run_sample(job)
            series[k] = s
    return series


def _stage(name: str, fn, *args, **kwargs):
    logger.info(f"Offline stage '{name}' started", extra={"stage": name, "event": "start"})
    start = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except Exception as e:
        logger.error(f"Offline stage '{name}' failed: {e}", extra={"stage": name, "event": "error"})
        raise PipelineStageError(name, e) from e
    logger.info(f"Offline stage '{name}' done in {time.perf_counter() - start:.2f} seconds",
                extra={"stage": name, "event": "done"})
    return result


def _mu_box(plan: SweepPlan) -> Tuple[np.ndarray, np.ndarray]:
    boxes = [plan.box(n) for n in plan.parameter_names]
    return np.array([b[0] for b in boxes]), np.array([b[1] for b in boxes])


def reduce_all(matrices: Dict[str, snapshot_store.SnapshotMatrix], rpod_config: RpodConfig,
               method: str = "rpod") -> Dict[str, ReducedBasis]:
    return {var: reduction.build_basis(S, rpod_config.rank, method, rpod_config.oversample,
                                       rpod_config.power, rpod_config.seed)
            for var, S in matrices.items()}


def train_all(artifacts: RomArtifacts, lstm_config: LstmConfig, progress: bool = True):
    histories = {}
    for var, table in artifacts.coefficients.items():
        hyper = lstm_config.for_variable(var)
        dataset = lstm_forecaster.build_dataset(table, artifacts.samples, artifacts.times, hyper.lookback)
        model, history = lstm_forecaster.train(dataset, hyper, lstm_config.seed, variable=var,
                                               mu_box=_mu_box(artifacts.plan), progress=progress)
        model.fingerprint = artifacts.fingerprint
        artifacts.models[var] = model
        histories[var] = history
    return histories


def offline(plan: SweepPlan, rpod_config: Optional[RpodConfig] = None, lstm_config: Optional[LstmConfig] = None,
            output_dir=None, jobs: int = 1, train_models: bool = True, progress: bool = True) -> RomArtifacts:
    rpod_config = rpod_config or RpodConfig()
    lstm_config = lstm_config or LstmConfig()
    output_dir = Path(output_dir or settings.get_data_dir())
    fingerprint = plan.fingerprint()

    series = _stage("sweep", run_sweep, plan, output_dir, jobs, progress)
    matrices = _stage("assemble", lambda: {var: snapshot_store.assemble_matrix(series, var, fingerprint)
                                           for var in VARIABLES})
    bases = _stage("reduce", reduce_all, matrices, rpod_config)
    artifacts = RomArtifacts(
        plan=plan, fingerprint=fingerprint, grid=matrices["q1"].grid, samples=plan.samples(),
        times=matrices["q1"].times, bases=bases,
        averages={var: S.averages for var, S in matrices.items()}, directory=output_dir,
    )
    artifacts.coefficients = _stage("coefficients", lambda: {
        var: reduction.modal_coefficients(bases[var], matrices[var]) for var in VARIABLES})
    histories = _stage("train", train_all, artifacts, lstm_config, progress) if train_models else {}
    _stage("persist", save_artifacts, artifacts, output_dir, matrices, histories)
    return artifacts


# --- persistence -----------------------------------------------------------------

def _reduced_path(directory: Path, var: str) -> Path:
    return directory / f"reduced-{var}.npz"


def save_artifacts(artifacts: RomArtifacts, output_dir, matrices=None, histories=None) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for var in VARIABLES:
        entry = {}
        if matrices and var in matrices:
            entry["snapshots"] = snapshot_store.write_snapshots(matrices[var], output_dir / f"snapshots-{var}.qgs").name
        if var in artifacts.bases:
            basis = artifacts.bases[var]
            entry["basis"] = reduction.write_basis(basis, output_dir / f"basis-{var}.qgb").name
            reduction.write_spectrum(basis.sigma, output_dir / f"spectrum-{var}.csv")
        if var in artifacts.coefficients:
            np.savez(_reduced_path(output_dir, var), averages=artifacts.averages[var],
                     coefficients=artifacts.coefficients[var].data, fingerprint=np.array(artifacts.fingerprint))
            entry["reduced"] = _reduced_path(output_dir, var).name
        if var in artifacts.models:
            entry["model"] = lstm_forecaster.save_model(artifacts.models[var], output_dir / f"lstm-{var}.pt").name
        if histories and var in histories:
            lstm_forecaster.write_history(histories[var], output_dir / f"history-{var}.csv")
            entry["history"] = f"history-{var}.csv"
        entries[var] = entry

    if artifacts.bases:
        reduction.energy_table({v: b.sigma for v, b in artifacts.bases.items()},
                               artifacts.bases["q1"].n_modes if "q1" in artifacts.bases else settings.N_MODES
                               ).to_csv(output_dir / "energy.csv", index=False, float_format="%.17g")

    manifest = {
        "version": MANIFEST_VERSION,
        "fingerprint": artifacts.fingerprint,
        "plan": json.loads(artifacts.plan.model_dump_json()),
        "parameter_names": list(artifacts.parameter_names),
        "samples": artifacts.samples.tolist(),
        "times": artifacts.times.tolist(),
        "variables": entries,
    }
    path = output_dir / settings.MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    artifacts.directory = output_dir
    logger.info(f"Wrote manifest {path}")
    return path


def load_artifacts(manifest_path, need_models: bool = True) -> RomArtifacts:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ArtifactIncompleteError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    directory = manifest_path.parent
    plan = SweepPlan(**manifest["plan"])
    fingerprint = manifest["fingerprint"]
    if plan.fingerprint() != fingerprint:
        raise ArtifactMismatchError(f"manifest fingerprint {fingerprint} does not match its plan")

    artifacts = RomArtifacts(plan=plan, fingerprint=fingerprint, grid=grid_from_config(plan.grid),
                             samples=np.asarray(manifest["samples"], dtype=float).reshape(len(manifest["samples"]), -1),
                             times=np.asarray(manifest["times"], dtype=float), directory=directory)
    for var, entry in manifest["variables"].items():
        if "basis" in entry:
            basis = reduction.read_basis(directory / entry["basis"])
            _check_fingerprint(basis.fingerprint, fingerprint, entry["basis"])
            artifacts.bases[var] = basis
        if "reduced" in entry:
            with np.load(directory / entry["reduced"], allow_pickle=False) as data:
                _check_fingerprint(str(data["fingerprint"]), fingerprint, entry["reduced"])
                artifacts.averages[var] = data["averages"]
                artifacts.coefficients[var] = CoefficientTable(var, data["coefficients"], artifacts.times.size)
        if need_models and "model" in entry:
            model = lstm_forecaster.load_model(directory / entry["model"])
            _check_fingerprint(model.fingerprint, fingerprint, entry["model"])
            artifacts.models[var] = model
    return artifacts


def _check_fingerprint(found: str, expected: str, what: str) -> None:
    if found != expected:
        raise ArtifactMismatchError(f"{what} belongs to sweep {found!r}, manifest is {expected!r}")


# --- online ------------------------------------------------------------------------

def nearest_sample(mu, samples: np.ndarray, scale: bool = False) -> int:
    """Index of the closest sample in Euclidean distance; ties go to the lowest index."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples.reshape(-1, 1)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if samples.shape[0] == 0:
        raise InvalidArgumentError("no samples to search")
    if mu.size != samples.shape[1]:
        raise InvalidArgumentError(f"mu has {mu.size} components, samples have {samples.shape[1]}")
    diff = samples - mu
    if scale:
        span = samples.max(axis=0) - samples.min(axis=0)
        diff = diff / np.where(span > 0, span, 1.0)
    dist = np.sqrt(np.sum(diff ** 2, axis=1))
    best = dist.min()
    return int(np.flatnonzero(dist <= best * (1.0 + 1e-12))[0])


def training_columns(artifacts: RomArtifacts, horizon_times) -> np.ndarray:
    """Column of each requested time in the training window; consistency mode only replays those."""
    horizon = np.atleast_1d(np.asarray(horizon_times, dtype=float))
    times = artifacts.times
    tol = 1e-9 * max(1.0, float(np.abs(times).max(initial=0.0)))
    columns = np.searchsorted(times, horizon - tol)
    inside = columns < times.size
    hit = np.zeros(horizon.size, dtype=bool)
    hit[inside] = np.abs(times[columns[inside]] - horizon[inside]) <= tol
    if not hit.all():
        missing = horizon[~hit]
        raise InvalidArgumentError(
            f"consistency mode replays the training window [{times[0]:g}, {times[-1]:g}]; "
            f"{missing.size} requested times are not training instants (first {missing[0]:g})")
    return columns


def predicted_coefficients(artifacts: RomArtifacts, variable: str, mu, horizon_times,
                           consistency: bool = False, scale: bool = False) -> Tuple[int, np.ndarray]:
    """(nearest sample, coefficient trajectory of shape (H, N_r)).

    Consistency mode returns the training coefficients of the nearest sample at
    the requested instants, which must lie in the training window.
    """
    artifacts.require(variable, need_model=not consistency)
    k = nearest_sample(mu, artifacts.samples, scale)
    block = artifacts.coefficients[variable].block(k)
    if consistency:
        return k, block[:, training_columns(artifacts, horizon_times)].T.copy()
    model = artifacts.models[variable]
    lookback = model.lookback
    coeffs = lstm_forecaster.predict_autoregressive(
        model, block[:, -lookback:].T, artifacts.times[-lookback:], mu, horizon_times)
    return k, coeffs


def reconstruct(artifacts: RomArtifacts, variable: str, mu, horizon_times, consistency: bool = False,
                scale: bool = False) -> List[Field]:
    """Nearest-sample time average plus modes times predicted coefficients, per horizon time."""
    k, coeffs = predicted_coefficients(artifacts, variable, mu, horizon_times, consistency, scale)
    mean = artifacts.averages[variable][k]
    modes = artifacts.bases[variable].modes
    return [Field(artifacts.grid, mean + modes @ c) for c in coeffs]


def reconstruct_mean(artifacts: RomArtifacts, variable: str, mu, horizon_times, consistency: bool = False,
                     scale: bool = False) -> Tuple[int, Field]:
    """Time average of the reconstruction over the horizon."""
    k, coeffs = predicted_coefficients(artifacts, variable, mu, horizon_times, consistency, scale)
    mean = artifacts.averages[variable][k]
    modes = artifacts.bases[variable].modes
    avg = coeffs.mean(axis=0) if coeffs.shape[0] else np.zeros(modes.shape[1])
    return k, Field(artifacts.grid, mean + modes @ avg)


def relative_l2_error(fom: Field, rom: Field) -> Tuple[float, bool]:
    """(||fom - rom|| / ||fom||, undefined); undefined when the reference norm vanishes."""
    reference = l2_norm(fom)
    if reference == 0.0:
        return float("nan"), True
    return l2_norm(fom - rom) / reference, False


def evaluate(artifacts: RomArtifacts, mu, fom_reference: SnapshotSeries, consistency: bool = False,
             scale: bool = False) -> EvaluationReport:
    """Relative L2 errors of the time-averaged fields over the reference window.

    In consistency mode the report also carries the fluctuation reconstruction
    error ||S_k - V C_k||_F / ||S_k||_F of the nearest sample.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    horizon = fom_reference.times
    if horizon.size == 0:
        raise InvalidArgumentError("reference series holds no snapshots")
    if consistency and (horizon.size != artifacts.times.size or not np.allclose(horizon, artifacts.times)):
        raise InvalidArgumentError(
            f"consistency mode needs a reference over the {artifacts.times.size} training instants, "
            f"got {horizon.size}")
    errors, undefined, fluct = {}, {}, {}
    nearest = -1
    for var in VARIABLES:
        nearest, rom_mean = reconstruct_mean(artifacts, var, mu, horizon, consistency, scale)
        eps, bad = relative_l2_error(snapshot_store.time_average(fom_reference, var), rom_mean)
        errors[var], undefined[var] = eps, bad
        if bad:
            logger.warning(f"FOM mean of {var} vanishes; error undefined")
        if consistency:
            reference = snapshot_store.fluctuation_array(fom_reference, var).T
            rom = artifacts.bases[var].modes @ artifacts.coefficients[var].block(nearest)
            norm = np.linalg.norm(reference)
            fluct[var] = float(np.linalg.norm(reference - rom) / norm) if norm > 0 else float("nan")
    return EvaluationReport(mu, nearest, errors, undefined, fluct)


def horizon_times(plan: SweepPlan) -> np.ndarray:
    n = int(round((plan.predict_end - plan.window_end) / plan.stride))
    return plan.window_end + plan.stride * np.arange(1, n + 1)


def reference_run(plan: SweepPlan, mu) -> SnapshotSeries:
    """Full order run sampled over the prediction window (window_end, predict_end]."""
    config = plan.simulation_for(mu, t_end=plan.predict_end, window_start=plan.window_end + plan.stride)
    return simulate(config, mu=mu, parameter_names=plan.parameter_names).series


def draw_test_points(plan: SweepPlan, n: int, seed: int) -> np.ndarray:
    """Uniform draws over the box of the varying parameters, shape (n, d)."""
    if n < 1:
        raise InvalidArgumentError(f"need at least one test point, got {n}")
    rng = np.random.default_rng(seed)
    lo, hi = _mu_box(plan)
    return lo + (hi - lo) * rng.random((n, lo.size))


def errors_frame(reports: Sequence[EvaluationReport], names: Sequence[str]) -> pd.DataFrame:
    columns = list(names) + [f"eps_{var}" for var in VARIABLES]
    return pd.DataFrame([r.to_row(names) for r in reports], columns=columns)


def benchmark(plan: SweepPlan, artifacts: RomArtifacts, matrix: Optional[snapshot_store.SnapshotMatrix] = None,
              rpod_config: Optional[RpodConfig] = None) -> pd.DataFrame:
    """Wall times of one FOM run, POD vs rPOD and one online reconstruction."""
    rpod_config = rpod_config or RpodConfig()
    mu = artifacts.samples[0]

    start = time.perf_counter()
    simulate(plan.simulation_for(mu, t_end=plan.predict_end))
    fom_seconds = time.perf_counter() - start

    rows = [{"phase": "fom_run", "seconds": fom_seconds, "speedup_vs_baseline": 1.0}]
    if matrix is not None:
        start = time.perf_counter()
        reduction.deterministic_pod(matrix)
        pod_seconds = time.perf_counter() - start
        p = min(rpod_config.oversample, min(matrix.data.shape) - rpod_config.rank)
        start = time.perf_counter()
        reduction.rpod(matrix, rpod_config.rank, max(p, 0), rpod_config.power, rpod_config.seed)
        rpod_seconds = time.perf_counter() - start
        rows.append({"phase": "pod", "seconds": pod_seconds, "speedup_vs_baseline": 1.0})
        rows.append({"phase": "rpod", "seconds": rpod_seconds, "speedup_vs_baseline": pod_seconds / rpod_seconds})

    start = time.perf_counter()
    horizon = horizon_times(plan)
    for var in VARIABLES:
        reconstruct(artifacts, var, mu, horizon)
    online_seconds = time.perf_counter() - start
    rows.append({"phase": "online", "seconds": online_seconds,
                 "speedup_vs_baseline": fom_seconds / online_seconds})
    for row in rows:
        logger.info(f"{row['phase']}: {row['seconds']:.3f} s (x{row['speedup_vs_baseline']:.1f})")
    return pd.DataFrame(rows, columns=["phase", "seconds", "speedup_vs_baseline"])
