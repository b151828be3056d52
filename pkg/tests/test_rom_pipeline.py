import itertools
import json

import numpy as np
import pytest

from qgrom.core.config import settings
from qgrom.core.errors import ArtifactIncompleteError, ArtifactMismatchError, InvalidArgumentError
from qgrom.core.models import STUDY_DELTA, STUDY_FR, STUDY_SIGMA, VARIABLES, LstmConfig, RpodConfig, SweepPlan
from qgrom.services import reduction, rom_pipeline, snapshot_store
from qgrom.services.reduction import CoefficientTable
from qgrom.services.snapshot_store import SnapshotSeries
from qgrom.utils.grid_fields import Field


# --- nearest sample ----------------------------------------------------------------

def test_nearest_sample_exact_match_and_ties():
    samples = np.array([[0.3], [0.45], [0.6]])
    assert rom_pipeline.nearest_sample([0.45], samples) == 1
    assert rom_pipeline.nearest_sample([0.5], samples) == 1
    assert rom_pipeline.nearest_sample([1.0], np.array([[0.0], [2.0]])) == 0
    assert rom_pipeline.nearest_sample([1.0], np.array([[2.0], [0.0]])) == 0


def test_nearest_sample_on_three_parameter_study_grid():
    samples = np.array(list(itertools.product(STUDY_DELTA, STUDY_SIGMA, STUDY_FR)))
    k = rom_pipeline.nearest_sample([0.37, 0.0071, 0.093], samples)
    np.testing.assert_allclose(samples[k], [0.35, 0.007, 0.09])


def test_nearest_sample_ignores_sample_order():
    rng = np.random.default_rng(0)
    samples = rng.uniform(0, 1, (6, 2))
    for _ in range(10):
        mu = rng.uniform(0, 1, 2)
        expected = samples[rom_pipeline.nearest_sample(mu, samples)]
        for perm in itertools.permutations(range(6)):
            shuffled = samples[list(perm)]
            np.testing.assert_array_equal(shuffled[rom_pipeline.nearest_sample(mu, shuffled)], expected)


def test_nearest_sample_scaling_option():
    samples = np.array([[0.3, 0.006], [0.32, 0.010]])
    mu = [0.305, 0.0098]
    assert rom_pipeline.nearest_sample(mu, samples) == 0
    assert rom_pipeline.nearest_sample(mu, samples, scale=True) == 1


def test_nearest_sample_argument_checks():
    with pytest.raises(InvalidArgumentError):
        rom_pipeline.nearest_sample([0.3, 0.1], np.array([[0.3], [0.4]]))
    with pytest.raises(InvalidArgumentError):
        rom_pipeline.nearest_sample([0.3], np.zeros((0, 1)))


# --- error metric ---------------------------------------------------------------------

def test_relative_error_metric(small_grid):
    f = Field(small_grid, np.random.default_rng(1).standard_normal(small_grid.n_cells))
    assert rom_pipeline.relative_l2_error(f, f) == (0.0, False)
    eps, undefined = rom_pipeline.relative_l2_error(f, f * 2.0)
    assert eps == pytest.approx(1.0, abs=1e-12) and not undefined
    g = Field(small_grid, f.values + 0.1)
    scaled, _ = rom_pipeline.relative_l2_error(f * 7.0, g * 7.0)
    assert scaled == pytest.approx(rom_pipeline.relative_l2_error(f, g)[0], rel=1e-12)
    eps, undefined = rom_pipeline.relative_l2_error(f * 0.0, f)
    assert undefined and np.isnan(eps)


# --- plan helpers -------------------------------------------------------------------------

def test_desk_prediction_horizon():
    horizon = rom_pipeline.horizon_times(SweepPlan.preset("desk"))
    assert horizon.size == 40
    assert horizon[0] == pytest.approx(6.1)
    assert horizon[-1] == pytest.approx(10.0)


def test_draw_test_points_is_reproducible_and_in_box():
    plan = SweepPlan.preset("delta_sigma")
    a = rom_pipeline.draw_test_points(plan, 5, seed=3)
    b = rom_pipeline.draw_test_points(plan, 5, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (5, 2)
    assert np.all((a[:, 0] >= 0.2) & (a[:, 0] <= 0.6))
    assert np.all((a[:, 1] >= 0.006) & (a[:, 1] <= 0.01))
    with pytest.raises(InvalidArgumentError):
        rom_pipeline.draw_test_points(plan, 0, seed=3)


# --- online phase -----------------------------------------------------------------------------

def test_consistency_mode_matches_projection_error(synthetic_artifacts, desk_series):
    plan, series = desk_series
    artifacts = synthetic_artifacts(n_modes=4)
    k = 2
    report = rom_pipeline.evaluate(artifacts, plan.samples()[k], series[k], consistency=True)
    assert report.nearest == k
    for var in VARIABLES:
        S = snapshot_store.assemble_matrix(series, var)
        expected = reduction.projection_error(artifacts.bases[var], S.block(k))
        assert report.fluctuation_errors[var] == pytest.approx(expected, rel=1e-10)
        # fluctuation coefficients of a training sample average to zero
        assert report.errors[var] <= 1e-10


def test_more_modes_never_increase_consistency_error(synthetic_artifacts, desk_series, tmp_path):
    plan, series = desk_series
    few = synthetic_artifacts(n_modes=2, directory=tmp_path / "few")
    many = synthetic_artifacts(n_modes=4, directory=tmp_path / "many")
    mu = plan.samples()[1]
    a = rom_pipeline.evaluate(few, mu, series[1], consistency=True)
    b = rom_pipeline.evaluate(many, mu, series[1], consistency=True)
    for var in VARIABLES:
        assert b.fluctuation_errors[var] <= a.fluctuation_errors[var] + 1e-12


def test_zero_coefficients_reconstruct_the_time_average(synthetic_artifacts):
    artifacts = synthetic_artifacts()
    for var in VARIABLES:
        table = artifacts.coefficients[var]
        artifacts.coefficients[var] = CoefficientTable(var, np.zeros_like(table.data), table.n_times)
    fields = rom_pipeline.reconstruct(artifacts, "psi1", [0.31], artifacts.times, consistency=True)
    assert len(fields) == artifacts.times.size
    for f in fields:
        np.testing.assert_array_equal(f.values, artifacts.averages["psi1"][0])


def test_lstm_reconstruction_over_horizon(synthetic_artifacts):
    artifacts = synthetic_artifacts()
    horizon = rom_pipeline.horizon_times(artifacts.plan)
    fields = rom_pipeline.reconstruct(artifacts, "q2", [0.5], horizon)
    assert len(fields) == 40
    # constant models predict zero fluctuations
    np.testing.assert_allclose(fields[-1].values, artifacts.averages["q2"][1], atol=1e-12)
    k, mean = rom_pipeline.reconstruct_mean(artifacts, "q2", [0.5], horizon)
    assert k == 1
    np.testing.assert_allclose(mean.values, artifacts.averages["q2"][1], atol=1e-12)


def test_vanishing_reference_is_flagged(synthetic_artifacts):
    artifacts = synthetic_artifacts()
    zero = np.zeros((3, artifacts.grid.n_cells))
    reference = SnapshotSeries(artifacts.grid, np.array([0.3]), ("delta",), np.array([6.1, 6.2, 6.3]),
                               {v: zero for v in VARIABLES})
    report = rom_pipeline.evaluate(artifacts, [0.3], reference)
    assert all(report.undefined.values())
    frame = rom_pipeline.errors_frame([report], artifacts.parameter_names)
    assert list(frame.columns) == ["delta"] + [f"eps_{v}" for v in VARIABLES]
    assert frame["eps_q1"].isna().all()


def test_missing_model_is_reported(synthetic_artifacts):
    artifacts = synthetic_artifacts(with_models=False)
    with pytest.raises(ArtifactIncompleteError):
        rom_pipeline.reconstruct(artifacts, "q1", [0.3], [6.1])
    assert len(rom_pipeline.reconstruct(artifacts, "q1", [0.3], artifacts.times, consistency=True)) == 41


def test_consistency_reconstruction_follows_requested_times(synthetic_artifacts):
    artifacts = synthetic_artifacts()
    every = rom_pipeline.reconstruct(artifacts, "q1", [0.3], artifacts.times, consistency=True)
    picked = rom_pipeline.reconstruct(artifacts, "q1", [0.3], artifacts.times[[3, 7]], consistency=True)
    assert len(picked) == 2
    np.testing.assert_array_equal(picked[0].values, every[3].values)
    np.testing.assert_array_equal(picked[1].values, every[7].values)
    with pytest.raises(InvalidArgumentError, match="training window"):
        rom_pipeline.reconstruct(artifacts, "q1", [0.3], [6.1, 6.2], consistency=True)


def test_consistency_evaluation_needs_the_training_window(synthetic_artifacts):
    artifacts = synthetic_artifacts()
    zero = np.zeros((3, artifacts.grid.n_cells))
    beyond = SnapshotSeries(artifacts.grid, np.array([0.3]), ("delta",), np.array([6.1, 6.2, 6.3]),
                            {v: zero + 1.0 for v in VARIABLES})
    with pytest.raises(InvalidArgumentError, match="training instants"):
        rom_pipeline.evaluate(artifacts, [0.3], beyond, consistency=True)
    inside = SnapshotSeries(artifacts.grid, np.array([0.3]), ("delta",), artifacts.times[:3],
                            {v: zero + 1.0 for v in VARIABLES})
    with pytest.raises(InvalidArgumentError):
        rom_pipeline.evaluate(artifacts, [0.3], inside, consistency=True)


# --- persistence --------------------------------------------------------------------------------

def test_manifest_round_trip(synthetic_artifacts, tmp_path):
    artifacts = synthetic_artifacts()
    manifest = tmp_path / "rom" / settings.MANIFEST_NAME
    back = rom_pipeline.load_artifacts(manifest)
    assert back.fingerprint == artifacts.fingerprint
    assert back.grid == artifacts.grid
    np.testing.assert_array_equal(back.samples, artifacts.samples)
    np.testing.assert_array_equal(back.times, artifacts.times)
    for var in VARIABLES:
        np.testing.assert_array_equal(back.bases[var].modes, artifacts.bases[var].modes)
        np.testing.assert_array_equal(back.coefficients[var].data, artifacts.coefficients[var].data)
        np.testing.assert_array_equal(back.averages[var], artifacts.averages[var])
        assert (tmp_path / "rom" / f"spectrum-{var}.csv").is_file()
    assert set(back.models) == set(VARIABLES)
    assert (tmp_path / "rom" / "energy.csv").is_file()


def test_tampered_manifest_is_rejected(synthetic_artifacts, tmp_path):
    synthetic_artifacts()
    manifest = tmp_path / "rom" / settings.MANIFEST_NAME
    data = json.loads(manifest.read_text())
    data["fingerprint"] = "0000000000000000"
    manifest.write_text(json.dumps(data))
    with pytest.raises(ArtifactMismatchError):
        rom_pipeline.load_artifacts(manifest)


def test_foreign_basis_is_rejected(synthetic_artifacts, tmp_path):
    artifacts = synthetic_artifacts()
    basis = artifacts.bases["q1"]
    foreign = reduction.ReducedBasis("q1", basis.modes, basis.sigma, basis.provenance, basis.grid,
                                     "ffffffffffffffff")
    reduction.write_basis(foreign, tmp_path / "rom" / "basis-q1.qgb")
    with pytest.raises(ArtifactMismatchError):
        rom_pipeline.load_artifacts(tmp_path / "rom" / settings.MANIFEST_NAME)


def test_missing_manifest(tmp_path):
    with pytest.raises(ArtifactIncompleteError):
        rom_pipeline.load_artifacts(tmp_path / "nowhere" / settings.MANIFEST_NAME)


# --- end to end ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_desk_offline_pipeline(tmp_path):
    plan = SweepPlan.preset("desk")
    lstm = LstmConfig(q={"epochs": 20}, psi={"epochs": 20})
    artifacts = rom_pipeline.offline(plan, RpodConfig(rank=10, oversample=10, power=1), lstm,
                                     output_dir=tmp_path, progress=False)
    assert (tmp_path / settings.MANIFEST_NAME).is_file()
    assert len(list((tmp_path / "series").glob("sample-*.npz"))) == 3
    assert artifacts.times.size == 41

    cached = rom_pipeline.run_sweep(plan, tmp_path, progress=False)
    matrix = snapshot_store.read_snapshots(tmp_path / "snapshots-q1.qgs")
    report = rom_pipeline.evaluate(artifacts, plan.samples()[0], cached[0], consistency=True)
    expected = reduction.projection_error(artifacts.bases["q1"], matrix.block(0))
    assert report.fluctuation_errors["q1"] == pytest.approx(expected, rel=1e-10)
    basis = artifacts.bases["q1"]
    five = reduction.ReducedBasis("q1", basis.modes[:, :5], basis.sigma)
    for k in range(3):
        assert reduction.projection_error(basis, matrix.block(k)) <= \
            reduction.projection_error(five, matrix.block(k)) + 1e-12

    loaded = rom_pipeline.load_artifacts(tmp_path / settings.MANIFEST_NAME)
    fields = rom_pipeline.reconstruct(loaded, "psi1", [0.5], rom_pipeline.horizon_times(plan))
    assert len(fields) == 40 and all(np.all(np.isfinite(f.values)) for f in fields)
