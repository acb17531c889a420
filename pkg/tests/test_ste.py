import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtg.numerics import fd_gradient, max_rel_error
from vtg.ste import (
    SteTable,
    TokenGrid,
    apply,
    apply_sequence_only,
    grad_time_rows,
    lookup_time,
)


def random_grid(rng, n=3, m=4, d=5, times=None):
    times = np.sort(rng.uniform(0, 50, n)) if times is None else np.asarray(times, float)
    return TokenGrid(rng.normal(size=(n, m, d)), times)


def test_fresh_table_time_rows_are_zero():
    table = SteTable.create(8, 6, time_rows=8192, rng=0)
    assert table.time_weight.shape == (8192, 6)
    assert not table.time_weight.any()
    assert table.trained == set()


def test_zero_init_equals_sequence_embedding_bitwise():
    rng = np.random.default_rng(0)
    table = SteTable.create(16, 5, time_rows=64, rng=1)
    grid = random_grid(rng, n=10)
    for mode in ("train", "test"):
        out = apply(grid, table, mode)
        assert np.array_equal(out.values, apply_sequence_only(grid, table).values)


def test_single_frame_at_zero():
    rng = np.random.default_rng(1)
    table = SteTable(np.zeros((4, 3)), rng.normal(size=(10, 3)))
    grid = random_grid(rng, n=1, m=2, d=3, times=[0.0])
    out = apply(grid, table, "train")
    np.testing.assert_array_equal(out.values, grid.values + table.time_weight[0])
    assert table.trained == {0}


def test_three_frames_hand_rows():
    rng = np.random.default_rng(2)
    ws = rng.normal(size=(3, 2))
    wt = rng.normal(size=(10, 2))
    table = SteTable(ws, wt)
    grid = random_grid(rng, n=3, m=2, d=2, times=[1.2, 3.6, 7.5])
    out = apply(grid, table, "train")
    # 7.5 rounds half-up to 8
    for i, row in enumerate([1, 4, 8]):
        for j in range(2):
            np.testing.assert_allclose(out.values[i, j], grid.values[i, j] + ws[i] + wt[row], rtol=0, atol=1e-15)
    assert table.trained == {1, 4, 8}


def test_out_of_range_timestamp():
    table = SteTable.create(4, 2, time_rows=10)
    grid = TokenGrid(np.zeros((1, 1, 2)), [10.0])
    with pytest.raises(ValueError, match="10.0"):
        apply(grid, table, "train")
    with pytest.raises(ValueError):
        lookup_time(table, -1.0)


def test_too_many_frames():
    table = SteTable.create(2, 2, time_rows=10)
    with pytest.raises(ValueError):
        apply(TokenGrid(np.zeros((3, 1, 2)), [1, 2, 3]), table)


@pytest.fixture
def table_10_20():
    rng = np.random.default_rng(3)
    t = SteTable(np.zeros((4, 6)), rng.normal(size=(64, 6)))
    t.mark_trained([10, 20])
    return t


def test_interpolation_cases(table_10_20):
    w = table_10_20.time_weight
    assert np.array_equal(lookup_time(table_10_20, 10), w[10])
    assert np.array_equal(lookup_time(table_10_20, 20), w[20])
    np.testing.assert_allclose(lookup_time(table_10_20, 15), 0.5 * w[10] + 0.5 * w[20], rtol=0, atol=1e-12)
    np.testing.assert_allclose(lookup_time(table_10_20, 12), 0.8 * w[10] + 0.2 * w[20], rtol=0, atol=1e-12)


def test_interpolation_clamps_outside_hull(table_10_20):
    w = table_10_20.time_weight
    assert np.array_equal(lookup_time(table_10_20, 3.0), w[10])
    assert np.array_equal(lookup_time(table_10_20, 40.0), w[20])


def test_empty_trained_set_gives_zero():
    t = SteTable(np.zeros((2, 3)), np.ones((8, 3)))
    assert not lookup_time(t, 4.0).any()


def test_interpolation_is_linear_between_trained_rows(table_10_20):
    w = table_10_20.time_weight
    step = lookup_time(table_10_20, 14) - lookup_time(table_10_20, 13)
    np.testing.assert_allclose(step, 0.1 * (w[20] - w[10]), rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 63.9), st.lists(st.integers(0, 63), min_size=1, max_size=8))
def test_interpolation_is_convex(t, trained):
    rng = np.random.default_rng(len(trained))
    table = SteTable(np.zeros((2, 4)), rng.normal(size=(64, 4)))
    table.mark_trained(trained)
    rows = [r for r, _ in table.time_weights(t, "test")]
    out = lookup_time(table, t)
    lo = table.time_weight[rows].min(0) - 1e-12
    hi = table.time_weight[rows].max(0) + 1e-12
    assert np.all((out >= lo) & (out <= hi))
    ws = [w for _, w in table.time_weights(t, "test")]
    assert abs(sum(ws) - 1) < 1e-12 and all(w >= 0 for w in ws)


def test_frame_order_selects_sequence_row():
    rng = np.random.default_rng(4)
    table = SteTable(rng.normal(size=(5, 3)), np.zeros((100, 3)))
    grid_a = TokenGrid(np.zeros((5, 2, 3)), [1, 2, 3, 4, 5])
    grid_b = TokenGrid(np.zeros((5, 2, 3)), [10, 20, 30, 40, 50])
    assert np.array_equal(apply(grid_a, table).values, apply(grid_b, table).values)


def test_grad_zero_and_ones():
    rng = np.random.default_rng(5)
    table = SteTable.create(4, 3, time_rows=20, rng=0)
    grid = random_grid(rng, n=1, m=7, d=3, times=[4.2])
    g = grad_time_rows(table, grid, np.zeros_like(grid.values))
    assert all(not v.any() for v in g.time_rows.values())
    g = grad_time_rows(table, grid, np.ones_like(grid.values))
    np.testing.assert_array_equal(g.time_rows[4], np.full(3, 7.0))
    np.testing.assert_array_equal(g.seq_rows[0], np.full(3, 7.0))
    with pytest.raises(ValueError):
        grad_time_rows(table, grid, np.ones((2, 2, 2)))


def _ste_fd_check(seed, mode):
    rng = np.random.default_rng(seed)
    table = SteTable(rng.normal(size=(4, 3)), rng.normal(size=(30, 3)))
    table.mark_trained([2, 9, 17])
    grid = TokenGrid(rng.normal(size=(4, 2, 3)), np.sort(rng.uniform(0, 25, 4)))
    up = rng.normal(size=grid.values.shape)
    g = grad_time_rows(table, grid, up, mode)
    gs, gt = g.dense(table)

    def loss_wt(wt):
        t = SteTable(table.seq_weight, wt, set(table.trained))
        return float((apply(grid, t, mode).values * up).sum())

    def loss_ws(ws):
        t = SteTable(ws, table.time_weight, set(table.trained))
        return float((apply(grid, t, mode).values * up).sum())

    errs = [max_rel_error(gt, fd_gradient(loss_wt, table.time_weight)), max_rel_error(gs, fd_gradient(loss_ws, table.seq_weight))]
    return max(errs)


@pytest.mark.parametrize("mode", ["train", "test"])
def test_grad_matches_finite_differences(mode):
    for seed in range(5):
        assert _ste_fd_check(seed, mode) < 1e-4


def test_checkpoint_round_trip(tmp_path, table_10_20):
    p = tmp_path / "ste.json"
    table_10_20.save(p)
    back = SteTable.load(p)
    assert np.array_equal(back.time_weight, table_10_20.time_weight)
    assert np.array_equal(back.seq_weight, table_10_20.seq_weight)
    assert back.trained == table_10_20.trained


def test_grid_invariants():
    with pytest.raises(ValueError):
        TokenGrid(np.zeros((2, 1, 1)), [3.0, 1.0])
    with pytest.raises(ValueError):
        TokenGrid(np.full((1, 1, 1), np.nan), [0.0])
