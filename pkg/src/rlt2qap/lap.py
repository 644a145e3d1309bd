"""Dense linear assignment via the alternating-tree (shortest augmenting path)
Hungarian method, with dual potentials.

The numba kernels work on raw arrays and are shared with the ascent engine,
which solves tens of thousands of small LAPs per iteration. The dataclass
layer on top is for callers that want one problem at a time.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba as nb
import numpy as np

DUAL_TOL = 1e-9
_INF = np.inf


@nb.njit(cache=True, nogil=True)
def hungarian(cost, u, v, col4row):
    """Solve ``min sum cost[r, col4row[r]]`` in place.

    ``u`` and ``v`` must hold feasible starting potentials
    (``u[r] + v[c] <= cost[r, c]``); zeros are always fine for nonnegative
    costs and otherwise ``u`` should start at the row minima. On return they
    are optimal duals and the optimum equals ``u.sum() + v.sum()``.
    Among equal-slack columns a free one wins, then the lowest index.
    """
    m = cost.shape[0]
    row4col = np.full(m, -1, np.int64)
    minv = np.empty(m)
    way = np.empty(m, np.int64)
    used = np.zeros(m, np.bool_)
    matched = np.zeros(m, np.bool_)
    # greedy start on tight edges; matched edges must be tight for the tree search
    for r in range(m):
        for c in range(m):
            if row4col[c] == -1 and cost[r, c] - u[r] - v[c] <= 0.0:
                row4col[c] = r
                matched[r] = True
                break
    for i in range(m):
        if matched[i]:
            continue
        for j in range(m):
            minv[j] = _INF
            used[j] = False
        cur_row = i
        j0 = -1
        while True:
            if j0 >= 0:
                used[j0] = True
                cur_row = row4col[j0]
            delta = _INF
            j1 = -1
            ur = u[cur_row]
            for j in range(m):
                if not used[j]:
                    red = cost[cur_row, j] - ur - v[j]
                    if red < minv[j]:
                        minv[j] = red
                        way[j] = j0
                    # equal slack: a free column ends the search, so prefer it
                    if minv[j] < delta or (minv[j] == delta and row4col[j] == -1
                                           and row4col[j1] != -1):
                        delta = minv[j]
                        j1 = j
            # dual update over the alternating tree
            u[i] += delta
            for j in range(m):
                if used[j]:
                    u[row4col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row4col[j0] == -1:
                break
        # augment along the stored path
        while True:
            jp = way[j0]
            if jp == -1:
                row4col[j0] = i
                break
            row4col[j0] = row4col[jp]
            j0 = jp
    for j in range(m):
        col4row[row4col[j]] = j
    total = 0.0
    for r in range(m):
        total += cost[r, col4row[r]]
    return total


@nb.njit(cache=True, nogil=True)
def _row_min_start(cost, u, v):
    m = cost.shape[0]
    for r in range(m):
        best = _INF
        for c in range(m):
            if cost[r, c] < best:
                best = cost[r, c]
        u[r] = best
    for c in range(m):
        best = _INF
        for r in range(m):
            red = cost[r, c] - u[r]
            if red < best:
                best = red
        v[c] = best


@nb.njit(cache=True, nogil=True)
def solve_tiles(costs, U, V, obj, assign, warm, lo, hi):
    """Solve tiles ``lo..hi-1`` of a ``(T, m, m)`` stack.

    With ``warm`` the potentials already in ``U``/``V`` are used as the
    starting point (they must be feasible); otherwise rows start at their
    minima (plus column reduction).
    """
    m = costs.shape[1]
    col4row = np.empty(m, np.int64)
    for t in range(lo, hi):
        if not warm:
            _row_min_start(costs[t], U[t], V[t])
        hungarian(costs[t], U[t], V[t], col4row)
        s = 0.0
        for r in range(m):
            s += U[t, r] + V[t, r]
            assign[t, r] = col4row[r]
        obj[t] = s


@nb.njit(cache=True, nogil=True)
def reduce_tiles(costs, U, V, lo, hi):
    """Replace each tile by its reduced costs and zero its potentials."""
    m = costs.shape[1]
    for t in range(lo, hi):
        for r in range(m):
            ur = U[t, r]
            for c in range(m):
                costs[t, r, c] -= ur + V[t, c]
        for r in range(m):
            U[t, r] = 0.0
            V[t, r] = 0.0


def chunk_bounds(total: int, workers: int) -> list[tuple[int, int]]:
    """Split ``range(total)`` into at most ``workers`` contiguous chunks."""
    workers = max(1, min(workers, total)) if total else 1
    step, extra = divmod(total, workers)
    out, lo = [], 0
    for w in range(workers):
        hi = lo + step + (1 if w < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def run_chunked(fn, total: int, workers: int, *args):
    """Run ``fn(*args, lo, hi)`` kernels over disjoint chunks of ``range(total)``.

    The kernels release the GIL, so threads give real parallelism on
    multi-core hosts; results land in disjoint slots either way.
    """
    bounds = chunk_bounds(total, workers)
    if len(bounds) == 1:
        fn(*args, *bounds[0])
        return
    with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
        for f in [pool.submit(fn, *args, lo, hi) for lo, hi in bounds]:
            f.result()


# ---- single-problem API ---------------------------------------------------

@dataclass(frozen=True)
class LapProblem:
    cost: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.cost, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
            raise ValueError(f"cost must be a non-empty square matrix, got shape {c.shape}")
        if not np.isfinite(c).all():
            raise ValueError("cost contains non-finite entries")
        object.__setattr__(self, "cost", c)

    @property
    def m(self) -> int:
        return self.cost.shape[0]


@dataclass(frozen=True)
class LapResult:
    assignment: np.ndarray
    row_dual: np.ndarray
    col_dual: np.ndarray
    objective: float

    def reduced(self, cost: np.ndarray) -> np.ndarray:
        return cost - self.row_dual[:, None] - self.col_dual[None, :]


@dataclass(frozen=True)
class LapBatch:
    costs: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.costs, dtype=np.float64)
        if c.ndim != 3 or c.shape[1] != c.shape[2] or c.shape[0] < 1:
            raise ValueError(f"costs must be (count, m, m) with count >= 1, got {c.shape}")
        object.__setattr__(self, "costs", c)

    @property
    def m(self) -> int:
        return self.costs.shape[1]

    @property
    def count(self) -> int:
        return self.costs.shape[0]


def solve_lap(p: LapProblem) -> LapResult:
    u = np.empty(p.m)
    v = np.empty(p.m)
    col4row = np.empty(p.m, np.int64)
    _row_min_start(p.cost, u, v)
    hungarian(p.cost, u, v, col4row)
    obj = float(p.cost[np.arange(p.m), col4row].sum())
    return LapResult(col4row, u, v, obj)


class TileError(ValueError):
    def __init__(self, index: int, msg: str):
        super().__init__(f"tile {index}: {msg}")
        self.index = index


def solve_batch(b: LapBatch, workers: int = 1) -> list[LapResult]:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    bad = ~np.isfinite(b.costs).reshape(b.count, -1).all(axis=1)
    if bad.any():
        raise TileError(int(np.argmax(bad)), "cost contains non-finite entries")
    T, m = b.count, b.m
    U = np.empty((T, m))
    V = np.empty((T, m))
    obj = np.empty(T)
    assign = np.empty((T, m), np.int64)
    run_chunked(solve_tiles, T, workers, b.costs, U, V, obj, assign, False)
    rows = np.arange(m)
    return [LapResult(assign[t], U[t], V[t], float(b.costs[t, rows, assign[t]].sum()))
            for t in range(T)]


def reduced_cost(r: LapResult, p: LapProblem, row: int, col: int) -> float:
    if not (0 <= row < p.m and 0 <= col < p.m):
        raise IndexError(f"({row}, {col}) outside {p.m}x{p.m} problem")
    return float(p.cost[row, col] - r.row_dual[row] - r.col_dual[col])


def check_result(p: LapProblem, r: LapResult, tol: float = DUAL_TOL) -> list[str]:
    """Return a list of violated LapResult invariants (empty when all hold)."""
    problems = []
    m = p.m
    if sorted(r.assignment.tolist()) != list(range(m)):
        problems.append("assignment is not a permutation")
        return problems
    scale = tol * (1 + abs(r.objective))
    primal = p.cost[np.arange(m), r.assignment].sum()
    dual = r.row_dual.sum() + r.col_dual.sum()
    if abs(primal - r.objective) > scale:
        problems.append(f"objective {r.objective} != assigned cost {primal}")
    if abs(dual - r.objective) > scale:
        problems.append(f"objective {r.objective} != dual sum {dual}")
    red = r.reduced(p.cost)
    if red.min() < -tol:
        i, j = np.unravel_index(np.argmin(red), red.shape)
        problems.append(f"reduced({i},{j}) = {red[i, j]:.3e} < -{tol}")
    on = red[np.arange(m), r.assignment]
    if on.max() > tol:
        i = int(np.argmax(on))
        problems.append(f"reduced({i},{r.assignment[i]}) = {on[i]:.3e} > {tol}")
    return problems
