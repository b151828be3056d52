import argparse
import logging
from pathlib import Path

from qgrom.core.logging_config import setup_logging
from qgrom.core.models import LstmConfig, RpodConfig, SweepPlan
from qgrom.services import rom_pipeline, snapshot_store


class Config:
    OUTPUT_DIR = "data/desk"
    PRESET = "desk"
    N_TEST_POINTS = 3
    SEED = 0
    JOBS = 1


def main():
    """Offline phase, consistency check, out-of-sample errors and timings on the desk plan."""
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=Config.OUTPUT_DIR)
    parser.add_argument("--jobs", type=int, default=Config.JOBS)
    parser.add_argument("--epochs", type=int, default=None)
    args = parser.parse_args()

    setup_logging()
    logger = logging.getLogger(__name__)
    out = Path(args.out)
    logger.info(f"Starting desk pipeline in {out}...")

    try:
        # --- 1. Offline phase ---
        plan = SweepPlan.preset(Config.PRESET)
        lstm = LstmConfig(seed=Config.SEED) if args.epochs is None else LstmConfig(
            q={"epochs": args.epochs}, psi={"epochs": args.epochs}, seed=Config.SEED)
        artifacts = rom_pipeline.offline(plan, RpodConfig(rank=10, seed=Config.SEED), lstm, out, jobs=args.jobs)

        # --- 2. Consistency mode at the training samples ---
        series = rom_pipeline.run_sweep(plan, out)
        for k, s in enumerate(series):
            report = rom_pipeline.evaluate(artifacts, artifacts.samples[k], s, consistency=True)
            logger.info(f"sample {k}: fluctuation errors "
                        + ", ".join(f"{v}={e:.3e}" for v, e in report.fluctuation_errors.items()))

        # --- 3. Out-of-sample errors ---
        reports = []
        for mu in rom_pipeline.draw_test_points(plan, Config.N_TEST_POINTS, Config.SEED):
            reference = rom_pipeline.reference_run(plan, mu)
            reports.append(rom_pipeline.evaluate(artifacts, mu, reference))
        rom_pipeline.errors_frame(reports, plan.parameter_names).to_csv(
            out / "errors.csv", index=False, float_format="%.17g")

        # --- 4. Timings ---
        matrix = snapshot_store.read_snapshots(out / "snapshots-q1.qgs")
        rom_pipeline.benchmark(plan, artifacts, matrix).to_csv(out / "timing.csv", index=False, float_format="%.6g")
        logger.info("Desk pipeline complete.")
    except Exception as e:
        logger.error(f"Desk pipeline failed: {e}")
        raise


if __name__ == "__main__":
    main()
