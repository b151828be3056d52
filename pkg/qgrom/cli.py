"""Command-line front end: python -m qgrom <command> [options]."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ValidationError

from qgrom.core.config import settings
from qgrom.core.errors import ArtifactMismatchError, ConfigError, InvalidArgumentError, QGRomError
from qgrom.core.logging_config import setup_logging
from qgrom.core.models import VARIABLES, RunConfig, SimulationConfig, SweepPlan
from qgrom.services import reduction, rom_pipeline, snapshot_store
from qgrom.services.qg_solver import simulate
from qgrom.utils.grid_fields import field_to_csv

logger = logging.getLogger(__name__)


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{path}: {details}") from e


def _override(model: BaseModel, **updates) -> BaseModel:
    """Re-validated copy with the non-None updates applied."""
    data = model.model_dump()
    data.update({k: v for k, v in updates.items() if v is not None})
    try:
        return type(model).model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _params_overrides(args) -> dict:
    return {"delta": args.delta, "sigma": args.sigma, "Fr": args.fr, "Re": args.re}


def _output_dir(args, config: RunConfig) -> Path:
    out = Path(args.out or config.output_dir or settings.get_data_dir())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _plan(args, config: RunConfig) -> SweepPlan:
    if getattr(args, "preset", None):
        plan = SweepPlan.preset(args.preset)
    elif config.plan is not None or config.preset is not None:
        plan = config.resolved_plan()
    else:
        plan = SweepPlan.preset("desk")
    return _override(plan, dt=getattr(args, "dt", None))


def _manifest(args) -> Path:
    return Path(args.manifest or settings.get_manifest_path())


# --- commands --------------------------------------------------------------------

def cmd_simulate(args, config: RunConfig) -> None:
    sim = config.simulation or SimulationConfig()
    params = _override(sim.params, **_params_overrides(args))
    grid = _override(sim.grid, nx=args.nx, ny=args.ny)
    sim = _override(sim, dt=args.dt, t_end=args.t_end, window_start=args.window_start, stride=args.stride)
    sim = sim.model_copy(update={"params": params, "grid": grid})
    out = _output_dir(args, config)

    result = simulate(sim)
    series = result.series
    snapshot_store.save_series(series, out / "series.npz", fingerprint="")
    if series.n_times == 0:
        logger.warning("No snapshots fell inside the requested window")
        return
    for var in VARIABLES:
        field_to_csv(snapshot_store.time_average(series, var), out / f"mean-{var}.csv")
    logger.info(f"{series.n_times} snapshots written to {out}")


def cmd_sweep(args, config: RunConfig) -> None:
    plan = _plan(args, config)
    out = _output_dir(args, config)
    series = rom_pipeline.run_sweep(plan, out, jobs=args.jobs)
    for var in VARIABLES:
        matrix = snapshot_store.assemble_matrix(series, var, plan.fingerprint())
        snapshot_store.write_snapshots(matrix, out / f"snapshots-{var}.qgs")


def cmd_decompose(args, config: RunConfig) -> None:
    matrix = snapshot_store.read_snapshots(args.input)
    out = _output_dir(args, config)
    rpod_config = _override(config.rpod, rank=args.rank, oversample=args.oversample, power=args.power,
                            seed=args.seed)
    method = "pod" if args.command == "pod" else "rpod"
    basis = reduction.build_basis(matrix, rpod_config.rank, method, rpod_config.oversample,
                                  rpod_config.power, rpod_config.seed)
    reduction.write_basis(basis, out / f"basis-{matrix.variable}.qgb")
    reduction.write_spectrum(basis.sigma, out / "spectrum.csv")
    reduction.energy_table({matrix.variable: basis.sigma}, basis.n_modes).to_csv(
        out / "energy.csv", index=False, float_format="%.17g")
    logger.info(f"Projection error with {basis.n_modes} modes: {reduction.projection_error(basis, matrix):.4e}")
    for i in range(min(args.modes_csv or 0, basis.n_modes)):
        field_to_csv(basis.mode_field(i), out / f"mode-{matrix.variable}-{i + 1:02d}.csv")
    if method == "rpod" and args.study:
        study = reduction.oversampling_study(matrix, rpod_config.rank, q=rpod_config.power)
        study.to_csv(out / "oversampling.csv", index=False, float_format="%.17g")


def cmd_train(args, config: RunConfig) -> None:
    plan = _plan(args, config)
    lstm = config.lstm
    if args.epochs is not None:
        lstm = lstm.model_copy(update={
            "q": _override(lstm.q, epochs=args.epochs), "psi": _override(lstm.psi, epochs=args.epochs)})
    rpod_config = _override(config.rpod, rank=args.rank)
    rom_pipeline.offline(plan, rpod_config, lstm, _output_dir(args, config), jobs=args.jobs)


def _mu_vector(values, artifacts) -> np.ndarray:
    mu = np.asarray(values if values is not None else artifacts.samples[0], dtype=float)
    if mu.size != artifacts.samples.shape[1]:
        raise InvalidArgumentError(
            f"--mu needs {artifacts.samples.shape[1]} values ({', '.join(artifacts.parameter_names)})")
    return mu


def cmd_predict(args, config: RunConfig) -> None:
    artifacts = rom_pipeline.load_artifacts(_manifest(args))
    mu = _mu_vector(args.mu, artifacts)
    horizon = rom_pipeline.horizon_times(artifacts.plan)
    if args.horizon_steps is not None:
        horizon = horizon[:args.horizon_steps]
    out = _output_dir(args, config)
    variables = [args.variable] if args.variable else list(VARIABLES)
    for var in variables:
        k, mean = rom_pipeline.reconstruct_mean(artifacts, var, mu, horizon,
                                                scale=config.evaluation.scale_nearest)
        field_to_csv(mean, out / f"prediction-{var}.csv")
        logger.info(f"{var}: nearest sample {k}, {horizon.size} steps predicted")


def cmd_evaluate(args, config: RunConfig) -> None:
    artifacts = rom_pipeline.load_artifacts(_manifest(args), need_models=not args.consistency)
    if args.snapshots:
        matrix = snapshot_store.read_snapshots(args.snapshots)
        if matrix.fingerprint != artifacts.fingerprint:
            raise ArtifactMismatchError(
                f"{args.snapshots} belongs to sweep {matrix.fingerprint!r}, manifest is {artifacts.fingerprint!r}")
    plan = artifacts.plan
    evaluation = _override(config.evaluation, n_test_points=args.n_test, seed=args.seed)
    names = artifacts.parameter_names

    reports = []
    if args.consistency:
        series = rom_pipeline.run_sweep(plan, artifacts.directory)
        for k, s in enumerate(series):
            report = rom_pipeline.evaluate(artifacts, artifacts.samples[k], s, consistency=True)
            reports.append(report)
            logger.info(f"sample {k}: fluctuation errors {report.fluctuation_errors}")
    else:
        points = rom_pipeline.draw_test_points(plan, evaluation.n_test_points, evaluation.seed)
        for mu in points:
            reference = rom_pipeline.reference_run(plan, mu)
            reports.append(rom_pipeline.evaluate(artifacts, mu, reference, scale=evaluation.scale_nearest))
    frame = rom_pipeline.errors_frame(reports, names)
    if args.consistency:
        for var in VARIABLES:
            frame[f"fluct_{var}"] = [r.fluctuation_errors.get(var, float("nan")) for r in reports]
    frame.to_csv(_output_dir(args, config) / "errors.csv", index=False, float_format="%.17g")


def cmd_bench(args, config: RunConfig) -> None:
    artifacts = rom_pipeline.load_artifacts(_manifest(args))
    matrix_path = artifacts.directory / "snapshots-q1.qgs"
    matrix = snapshot_store.read_snapshots(matrix_path) if matrix_path.is_file() else None
    timing = rom_pipeline.benchmark(artifacts.plan, artifacts, matrix, config.rpod)
    timing.to_csv(_output_dir(args, config) / "timing.csv", index=False, float_format="%.6g")


# --- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgrom", description="Two-layer QG solver and rPOD-LSTM reduced order model")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (default $QGROM_DATA_DIR)")
    common.add_argument("--json-log", action="store_true", help="emit one JSON object per log line")
    common.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="one full order run")
    for flag, kind in (("--nx", int), ("--ny", int), ("--dt", float), ("--t-end", float),
                       ("--window-start", float), ("--stride", float), ("--delta", float),
                       ("--sigma", float), ("--fr", float), ("--re", float)):
        p.add_argument(flag, type=kind)

    presets = ["delta", "delta_sigma", "delta_sigma_fr", "desk"]
    p = sub.add_parser("sweep", parents=[common], help="full order runs over the parameter samples")
    p.add_argument("--preset", choices=presets)
    p.add_argument("--dt", type=float)
    p.add_argument("--jobs", type=int, default=1)

    for name in ("pod", "rpod"):
        p = sub.add_parser(name, parents=[common], help=f"{name} of a stored snapshot matrix")
        p.add_argument("--in", dest="input", required=True, help="snapshot file")
        p.add_argument("--rank", type=int)
        p.add_argument("--oversample", type=int)
        p.add_argument("--power", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--study", action="store_true", help="also write oversampling.csv")
        p.add_argument("--modes-csv", type=int, metavar="N", help="also write the first N modes as x,y,value CSV")

    p = sub.add_parser("train", parents=[common], help="offline phase: sweep, reduce, train")
    p.add_argument("--preset", choices=presets)
    p.add_argument("--dt", type=float)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--rank", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("predict", parents=[common], help="online prediction for a parameter vector")
    p.add_argument("--manifest")
    p.add_argument("--mu", type=float, nargs="+")
    p.add_argument("--variable", choices=list(VARIABLES))
    p.add_argument("--horizon-steps", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="relative L2 errors of time-averaged fields")
    p.add_argument("--manifest")
    p.add_argument("--snapshots", help="snapshot file that must belong to the same sweep")
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--consistency", action="store_true", help="use training coefficients at the samples")

    p = sub.add_parser("bench", parents=[common], help="timing of offline and online phases")
    p.add_argument("--manifest")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "pod": cmd_decompose,
    "rpod": cmd_decompose,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, json_log=args.json_log)
    try:
        config = load_run_config(args.config)
        COMMANDS[args.command](args, config)
    except QGRomError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except (ValidationError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
