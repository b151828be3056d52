import json

import numpy as np
import pandas as pd

from qgrom.cli import main
from qgrom.core.config import settings
from qgrom.core.models import VARIABLES
from qgrom.services import snapshot_store
from qgrom.services.snapshot_store import SnapshotSeries

SMALL_RUN = ["--nx", "4", "--ny", "8", "--dt", "0.01", "--stride", "0.01"]


def _write_matrix(grid, path, fingerprint=""):
    rng = np.random.default_rng(0)
    series = [SnapshotSeries(grid, np.array([0.2 + 0.1 * k]), ("delta",), np.arange(5.0),
                             {v: rng.standard_normal((5, grid.n_cells)) for v in VARIABLES})
              for k in range(3)]
    return snapshot_store.write_snapshots(snapshot_store.assemble_matrix(series, "q1", fingerprint), path)


def test_simulate_writes_means(tmp_path):
    code = main(["simulate", *SMALL_RUN, "--t-end", "0.05", "--window-start", "0.02", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "series.npz").is_file()
    frame = pd.read_csv(tmp_path / "mean-psi1.csv")
    assert list(frame.columns) == ["x", "y", "value"]
    assert len(frame) == 32


def test_simulate_ending_before_window_succeeds_without_snapshots(tmp_path):
    code = main(["simulate", *SMALL_RUN, "--t-end", "0.02", "--window-start", "0.05", "--out", str(tmp_path)])
    assert code == 0
    assert snapshot_store.load_series(tmp_path / "series.npz").n_times == 0
    assert not (tmp_path / "mean-q1.csv").exists()


def test_json_log_stream(tmp_path, capsys):
    main(["simulate", *SMALL_RUN, "--t-end", "0.02", "--window-start", "0.0", "--out", str(tmp_path), "--json-log"])
    records = [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    assert records
    assert all({"time", "level", "logger", "message"} <= set(r) for r in records)


def test_malformed_config_is_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 1
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"simulation": {"dt": 0.01, "tiemstep": 3}}))
    assert main(["simulate", "--config", str(unknown), "--out", str(tmp_path)]) == 1
    assert not (tmp_path / "series.npz").exists()


def test_rpod_writes_basis_and_spectrum(tmp_path, small_grid):
    snapshots = _write_matrix(small_grid, tmp_path / "snapshots-q1.qgs")
    out = tmp_path / "rpod"
    code = main(["rpod", "--in", str(snapshots), "--rank", "4", "--oversample", "2", "--power", "1",
                 "--seed", "0", "--modes-csv", "2", "--out", str(out)])
    assert code == 0
    assert len(pd.read_csv(out / "mode-q1-02.csv")) == small_grid.n_cells
    assert not (out / "mode-q1-03.csv").exists()
    assert (out / "basis-q1.qgb").is_file()
    spectrum = pd.read_csv(out / "spectrum.csv")
    assert list(spectrum.columns) == ["index", "sigma"]
    assert np.all(np.diff(spectrum["sigma"].to_numpy()) <= 0)
    assert (out / "energy.csv").is_file()


def test_pod_with_too_many_modes_fails(tmp_path, small_grid):
    snapshots = _write_matrix(small_grid, tmp_path / "snapshots-q1.qgs")
    assert main(["pod", "--in", str(snapshots), "--rank", "20", "--out", str(tmp_path / "o")]) == 1
    assert main(["rpod", "--in", str(snapshots), "--rank", "20", "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o" / "basis-q1.qgb").exists()


def test_predict_writes_mean_prediction(tmp_path, synthetic_artifacts):
    synthetic_artifacts()
    manifest = tmp_path / "rom" / settings.MANIFEST_NAME
    out = tmp_path / "pred"
    code = main(["predict", "--manifest", str(manifest), "--mu", "0.5", "--variable", "psi1",
                 "--horizon-steps", "5", "--out", str(out)])
    assert code == 0
    assert len(pd.read_csv(out / "prediction-psi1.csv")) == 512


def test_predict_with_wrong_parameter_count_fails(tmp_path, synthetic_artifacts):
    synthetic_artifacts()
    manifest = tmp_path / "rom" / settings.MANIFEST_NAME
    assert main(["predict", "--manifest", str(manifest), "--mu", "0.5", "0.1", "--out", str(tmp_path)]) == 1


def test_predict_without_manifest_fails(tmp_path):
    assert main(["predict", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1


def test_evaluate_rejects_foreign_snapshots(tmp_path, synthetic_artifacts, small_grid):
    synthetic_artifacts()
    manifest = tmp_path / "rom" / settings.MANIFEST_NAME
    foreign = _write_matrix(small_grid, tmp_path / "foreign.qgs", fingerprint="0123456789abcdef")
    code = main(["evaluate", "--manifest", str(manifest), "--snapshots", str(foreign), "--consistency",
                 "--out", str(tmp_path / "eval")])
    assert code == 1
    assert not (tmp_path / "eval" / "errors.csv").exists()
