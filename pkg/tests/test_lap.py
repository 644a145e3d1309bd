import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from rlt2qap.lap import (LapBatch, LapProblem, TileError, check_result, reduced_cost,
                         solve_batch, solve_lap)
from conftest import brute_lap


def test_one_by_one():
    r = solve_lap(LapProblem([[5]]))
    assert r.assignment.tolist() == [0] and r.objective == 5
    assert r.row_dual.sum() + r.col_dual.sum() == 5


def test_two_by_two():
    p = LapProblem([[1, 2], [3, 0]])
    r = solve_lap(p)
    assert r.assignment.tolist() == [0, 1] and r.objective == 1
    assert reduced_cost(r, p, 0, 1) >= 0


def test_brute_force_8x8():
    rng = np.random.default_rng(11)
    for _ in range(100):
        c = rng.integers(0, 100, (8, 8)).astype(float)
        p = LapProblem(c)
        r = solve_lap(p)
        assert r.objective == brute_lap(c)
        assert check_result(p, r) == []


def test_real_costs_against_scipy():
    rng = np.random.default_rng(5)
    for m in (1, 2, 3, 10, 25, 50):
        for _ in range(20):
            c = rng.normal(size=(m, m)) * 10
            r = solve_lap(LapProblem(c))
            rr, cc = linear_sum_assignment(c)
            assert abs(r.objective - c[rr, cc].sum()) <= 1e-9 * (1 + abs(r.objective))
            assert check_result(LapProblem(c), r) == []


def test_zero_heavy_tiles():
    rng = np.random.default_rng(2)
    for _ in range(50):
        c = np.where(rng.random((12, 12)) < 0.8, 0.0, rng.integers(1, 5, (12, 12)))
        r = solve_lap(LapProblem(c))
        assert r.objective == c[linear_sum_assignment(c)].sum()


def test_reduced_cost_support():
    # every column used by an optimal solution has a zero reduced cost in its row
    rng = np.random.default_rng(3)
    for _ in range(20):
        c = rng.integers(0, 20, (5, 5)).astype(float)
        p = LapProblem(c)
        r = solve_lap(p)
        red = r.reduced(c)
        assert red.min() >= -1e-9
        for row, col in enumerate(r.assignment):
            assert abs(reduced_cost(r, p, row, col)) <= 1e-9
            assert abs(red[:, col].min()) <= 1e-9


def test_reduced_cost_range():
    p = LapProblem([[1, 2], [3, 0]])
    with pytest.raises(IndexError):
        reduced_cost(solve_lap(p), p, 2, 0)


def test_contract_violations():
    with pytest.raises(ValueError):
        LapProblem([[1, np.nan], [0, 0]])
    with pytest.raises(ValueError):
        LapProblem([[1, 2, 3]])
    bad = np.zeros((3, 2, 2))
    bad[1, 0, 0] = np.inf
    with pytest.raises(TileError) as e:
        solve_batch(LapBatch(bad))
    assert e.value.index == 1


def test_batch_trivial():
    res = solve_batch(LapBatch(np.array([[[0, 1], [1, 0]]] * 3, float)), workers=2)
    assert [r.objective for r in res] == [0, 0, 0]


def test_batch_zero_tiles():
    res = solve_batch(LapBatch(np.zeros((500, 18, 18))), workers=2)
    assert all(r.objective == 0 for r in res)


def test_batch_worker_independence():
    c = np.random.default_rng(9).integers(0, 30, (50, 6, 6)).astype(float)
    one = solve_batch(LapBatch(c), workers=1)
    four = solve_batch(LapBatch(c), workers=4)
    single = [solve_lap(LapProblem(x)) for x in c]
    for a, b, s in zip(one, four, single):
        for x in (b, s):
            assert np.array_equal(a.assignment, x.assignment)
            assert np.array_equal(a.row_dual, x.row_dual) and a.objective == x.objective


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**32 - 1), st.integers(0, 6), st.integers(-50, 50))
def test_row_shift(m, seed, row, k):
    row %= m
    c = np.random.default_rng(seed).integers(0, 40, (m, m)).astype(float)
    r = solve_lap(LapProblem(c))
    shifted = c.copy()
    shifted[row] += k
    r2 = solve_lap(LapProblem(shifted))
    assert r2.objective == r.objective + k
    # the old assignment is still optimal
    assert shifted[np.arange(m), r.assignment].sum() == r2.objective


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_oracle_property(m, seed):
    c = np.random.default_rng(seed).integers(-20, 20, (m, m)).astype(float)
    p = LapProblem(c)
    r = solve_lap(p)
    assert r.objective == brute_lap(c)
    assert check_result(p, r) == []
