import numpy as np
import pytest
import torch

from qgrom.core.models import VARIABLES, LstmHyper, SweepPlan
from qgrom.services import reduction, rom_pipeline, snapshot_store
from qgrom.services.lstm_forecaster import LstmModel, LstmNetwork, Normalizer
from qgrom.services.snapshot_store import SnapshotSeries
from qgrom.utils.grid_fields import build_grid, grid_from_config


@pytest.fixture
def small_grid():
    return build_grid(6, 8, 0.0, 1.0, -1.0, 1.0)


@pytest.fixture(autouse=True)
def isolated_data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("QGROM_DATA_DIR", str(tmp_path / "data"))
    monkeypatch.delenv("QGROM_MANIFEST", raising=False)


def constant_model(n_params: int, n_modes: int, lookback: int = 3, output=None) -> LstmModel:
    """Zero-weight network: predicts its output bias whatever the window."""
    network = LstmNetwork(n_params + 1 + n_modes, n_modes, layers=1, cells=3)
    if output is not None:
        with torch.no_grad():
            network.out_b.copy_(torch.as_tensor(output, dtype=torch.float64))
    width = n_params + 1 + n_modes
    return LstmModel(
        network=network,
        hyper=LstmHyper(layers=1, cells_per_layer=3, epochs=1, lookback=lookback),
        input_norm=Normalizer(np.zeros(width), np.ones(width)),
        target_norm=Normalizer(np.zeros(n_modes), np.ones(n_modes)),
        n_params=n_params,
    )


@pytest.fixture
def desk_series():
    """Random snapshot series for the three desk samples, on the desk grid."""
    plan = SweepPlan.preset("desk")
    grid = grid_from_config(plan.grid)
    rng = np.random.default_rng(1)
    times = plan.window_start + plan.stride * np.arange(41)
    series = [
        SnapshotSeries(grid, mu, plan.parameter_names, times,
                       {v: rng.standard_normal((times.size, grid.n_cells)) + k for v in VARIABLES})
        for k, mu in enumerate(plan.samples())
    ]
    return plan, series


@pytest.fixture
def synthetic_artifacts(tmp_path, desk_series):
    """Saved artifacts from random desk series, POD bases and constant LSTMs."""

    def build(n_modes: int = 4, with_models: bool = True, directory=None):
        plan, series = desk_series
        fingerprint = plan.fingerprint()
        matrices = {v: snapshot_store.assemble_matrix(series, v, fingerprint) for v in VARIABLES}
        bases = {v: reduction.build_basis(matrices[v], n_modes, "pod") for v in VARIABLES}
        artifacts = rom_pipeline.RomArtifacts(
            plan=plan, fingerprint=fingerprint, grid=series[0].grid, samples=plan.samples(),
            times=series[0].times, bases=bases,
            averages={v: m.averages for v, m in matrices.items()},
            coefficients={v: reduction.modal_coefficients(bases[v], matrices[v]) for v in VARIABLES},
        )
        if with_models:
            for v in VARIABLES:
                model = constant_model(plan.samples().shape[1], n_modes)
                model.fingerprint = fingerprint
                artifacts.models[v] = model
        rom_pipeline.save_artifacts(artifacts, directory or tmp_path / "rom", matrices)
        return artifacts

    return build
