import itertools

import numpy as np
import pytest

from qgrom.core.errors import ArtifactMismatchError, InvalidArgumentError, SnapshotFormatError
from qgrom.core.models import VARIABLES
from qgrom.services.snapshot_store import (
    SnapshotSeries,
    assemble_matrix,
    export_column,
    fluctuations,
    load_series,
    read_snapshots,
    save_series,
    time_average,
    write_snapshots,
)
from qgrom.utils.grid_fields import build_grid


def _series(grid, mu, rows, times=None):
    rows = np.asarray(rows, dtype=float)
    times = np.arange(rows.shape[0], dtype=float) if times is None else times
    return SnapshotSeries(grid, np.atleast_1d(mu), ("delta",), times, {v: rows for v in VARIABLES})


def _random_series(grid, m, n_times, seed=0):
    rng = np.random.default_rng(seed)
    return [_series(grid, 0.2 + 0.1 * k, rng.standard_normal((n_times, grid.n_cells)) * (k + 1))
            for k in range(m)]


def test_times_must_increase(small_grid):
    with pytest.raises(InvalidArgumentError):
        _series(small_grid, 0.3, np.zeros((2, small_grid.n_cells)), times=np.array([1.0, 1.0]))


def test_time_average_of_constant_series(small_grid):
    f = np.linspace(-1, 1, small_grid.n_cells)
    s = _series(small_grid, 0.3, [f, f, f])
    np.testing.assert_allclose(time_average(s, "q1").values, f)
    assert all(np.all(g.values == 0.0) for g in fluctuations(s, "q1"))


def test_opposite_snapshots_average_to_zero(small_grid):
    f = np.linspace(-1, 1, small_grid.n_cells)
    s = _series(small_grid, 0.3, [f, -f])
    assert np.all(time_average(s, "psi2").values == 0.0)
    flucts = fluctuations(s, "psi2")
    np.testing.assert_array_equal(flucts[0].values, f)
    np.testing.assert_array_equal(flucts[1].values, -f)


def test_empty_series_rejected(small_grid):
    s = _series(small_grid, 0.3, np.zeros((0, small_grid.n_cells)))
    with pytest.raises(InvalidArgumentError):
        time_average(s, "q1")


def test_matrix_layout_and_zero_block_means(small_grid):
    m, n_times = 3, 5
    series = _random_series(small_grid, m, n_times)
    S = assemble_matrix(series, "q2")
    assert S.data.shape == (small_grid.n_cells, m * n_times)
    scale = np.abs(S.data).max()
    for k in range(m):
        assert np.max(np.abs(S.block(k).sum(axis=1))) <= 1e-12 * n_times * scale
        np.testing.assert_allclose(S.average_field(k).values, time_average(series[k], "q2").values)
    np.testing.assert_allclose(S.data[:, S.column_index(1, 2)],
                               series[1].snapshots("q2")[2] - series[1].snapshots("q2").mean(axis=0))


def test_column_index_map_is_a_bijection(small_grid):
    S = assemble_matrix(_random_series(small_grid, 4, 3), "q1")
    seen = set()
    for k, p in itertools.product(range(4), range(3)):
        j = S.column_index(k, p)
        assert S.split(j) == (k, p)
        seen.add(j)
    assert seen == set(range(12))


def test_single_snapshot_gives_zero_column(small_grid):
    S = assemble_matrix(_random_series(small_grid, 1, 1), "q1")
    assert S.data.shape == (small_grid.n_cells, 1)
    assert np.all(S.data == 0.0)


def test_mismatched_instants_rejected(small_grid):
    a = _random_series(small_grid, 1, 3)[0]
    b = _random_series(small_grid, 1, 4)[0]
    with pytest.raises(InvalidArgumentError):
        assemble_matrix([a, b], "q1")


def test_write_read_is_bit_exact_and_byte_stable(tmp_path, small_grid):
    S = assemble_matrix(_random_series(small_grid, 3, 4), "psi1", fingerprint="abcdef0123456789")
    first = write_snapshots(S, tmp_path / "a.qgs")
    back = read_snapshots(first)
    assert back.variable == "psi1" and back.fingerprint == "abcdef0123456789"
    assert back.grid == S.grid
    np.testing.assert_array_equal(back.data, S.data)
    np.testing.assert_array_equal(back.samples, S.samples)
    np.testing.assert_array_equal(back.averages, S.averages)
    np.testing.assert_array_equal(back.times, S.times)
    second = write_snapshots(back, tmp_path / "b.qgs")
    assert first.read_bytes() == second.read_bytes()


def test_corrupted_magic_is_rejected(tmp_path, small_grid):
    path = write_snapshots(assemble_matrix(_random_series(small_grid, 1, 2), "q1"), tmp_path / "s.qgs")
    raw = bytearray(path.read_bytes())
    raw[0:8] = b"NOTSNAP!"
    path.write_bytes(bytes(raw))
    with pytest.raises(SnapshotFormatError):
        read_snapshots(path)


def test_truncated_or_flipped_payload_is_rejected(tmp_path, small_grid):
    path = write_snapshots(assemble_matrix(_random_series(small_grid, 2, 2), "q1"), tmp_path / "s.qgs")
    raw = path.read_bytes()
    path.write_bytes(raw[:-20])
    with pytest.raises(SnapshotFormatError):
        read_snapshots(path)
    flipped = bytearray(raw)
    flipped[100] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(SnapshotFormatError):
        read_snapshots(path)


def test_series_cache_checks_fingerprint(tmp_path, small_grid):
    s = _random_series(small_grid, 1, 3)[0]
    path = save_series(s, tmp_path / "series" / "sample-0000.npz", "1111222233334444")
    back = load_series(path, "1111222233334444")
    np.testing.assert_array_equal(back.snapshots("q1"), s.snapshots("q1"))
    assert back.parameter_names == ("delta",)
    with pytest.raises(ArtifactMismatchError):
        load_series(path, "ffffffffffffffff")


def test_export_column_csv(tmp_path, small_grid):
    S = assemble_matrix(_random_series(small_grid, 2, 3), "q1")
    export_column(S, 4, tmp_path / "col.csv")
    lines = (tmp_path / "col.csv").read_text().splitlines()
    assert lines[0] == "x,y,value"
    assert len(lines) == small_grid.n_cells + 1


@pytest.mark.slow
def test_full_resolution_matrix_round_trip(tmp_path):
    grid = build_grid(64, 128, 0.0, 1.0, -1.0, 1.0)
    n_times = 401
    rows = np.random.default_rng(3).standard_normal((n_times, grid.n_cells)) * 50.0 + 3.0
    S = assemble_matrix([_series(grid, 0.4, rows)], "q1", fingerprint="0011223344556677")
    assert S.data.shape == (8192, 401)
    assert np.max(np.abs(S.block(0).sum(axis=1))) <= 1e-12 * n_times * np.abs(S.data).max()
    back = read_snapshots(write_snapshots(S, tmp_path / "full.qgs"))
    np.testing.assert_array_equal(back.data, S.data)
