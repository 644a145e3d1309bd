"""RLT2 Lagrangian dual ascent.

All multipliers are folded into one coefficient store ``(offset, b, C, D)``
that is a reparametrization of the QAP objective: for every permutation,

    obj(perm) = offset + sum b[i, p_i] + sum_{i != j} C[i, j, p_i, p_j]
              + sum over stored z switched on of D

(``store_objective`` evaluates the right side; tests pin it to the exact
objective). Each iteration solves the Z-LAPs (one per upper tile), folds
their values into the y level, solves the n^2 Y-LAPs, folds those into the
x level and solves the X-LAP.

Slow variants (S1/S2) solve on the full folded coefficients and keep the
LAP duals; the bound is ``offset`` plus the X-LAP value. Fast variants
(F1/F2) replace every level by its reduced costs after solving and move the
X-LAP value into ``offset``, which is then the bound. Both act on the same
store type, so a store produced by one can warm-start the other.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels as K
from .instance import QapInstance
from .lap import hungarian, reduce_tiles, run_chunked, solve_tiles, _row_min_start

log = logging.getLogger(__name__)

VARIANTS = ("F1", "F2", "S1", "S2")
SLACK_TOL = 1e-9
FEAS_TOL = 1e-7


class UnsupportedSize(ValueError):
    pass


# ---- index layout ------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    n: int
    ti: np.ndarray  # tile -> i, j, p, q
    tj: np.ndarray
    tp: np.ndarray
    tq: np.ndarray
    pa: np.ndarray  # pair id -> (a, b)
    pb: np.ndarray
    others: np.ndarray  # others[i] = indices != i, ascending
    valid: np.ndarray  # (n,n,n,n) mask of i != j and p != q
    lower: np.ndarray  # valid and i > j (no tile stored)

    @property
    def tiles(self) -> int:
        return len(self.ti)

    @property
    def pairs(self) -> int:
        return len(self.pa)

    def y_index(self):
        n, o = self.n, self.others
        ar = np.arange(n)
        return (ar[:, None, None, None], o[:, None, :, None],
                ar[None, :, None, None], o[None, :, None, :])


@lru_cache(maxsize=8)
def layout(n: int) -> Layout:
    pa, pb = np.triu_indices(n, 1)
    p, q = [a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), indexing="ij")]
    keep = p != q
    p, q = p[keep], q[keep]
    per = len(p)
    ti = np.repeat(pa, per)
    tj = np.repeat(pb, per)
    tp = np.tile(p, len(pa))
    tq = np.tile(q, len(pa))
    others = np.array([[j for j in range(n) if j != i] for i in range(n)],
                      dtype=np.int64).reshape(n, n - 1)
    eye = np.eye(n, dtype=bool)
    valid = ~eye[:, :, None, None] & ~eye[None, None, :, :]
    lower = valid & (np.arange(n)[:, None] > np.arange(n)[None, :])[:, :, None, None]
    return Layout(n, ti, tj, tp, tq, pa.astype(np.int64), pb.astype(np.int64),
                  others, valid, lower)


# ---- data model --------------------------------------------------------

@dataclass
class CoefficientStore:
    n: int
    offset: float
    b_mod: np.ndarray  # (n, n)
    c_mod: np.ndarray  # (n, n, n, n) indexed [i, j, p, q]
    d_mod: np.ndarray  # (tiles, n-2, n-2)

    def copy(self) -> "CoefficientStore":
        return CoefficientStore(self.n, self.offset, self.b_mod.copy(),
                                self.c_mod.copy(), self.d_mod.copy())

    def c_tile(self, i: int, p: int) -> np.ndarray:
        """The (n-1) x (n-1) block of C over j != i, q != p."""
        o = layout(self.n).others
        return self.c_mod[i][np.ix_(o[i], [p], o[p])][:, 0, :]

    @property
    def nbytes(self) -> int:
        return self.b_mod.nbytes + self.c_mod.nbytes + self.d_mod.nbytes


def d_mod_count(n: int) -> int:
    return n * n * (n - 1) ** 2 * (n - 2) ** 2 // 2


def init_coefficients(inst: QapInstance) -> CoefficientStore:
    n = inst.n
    if n < 3:
        raise UnsupportedSize(f"RLT2 needs n >= 3, got {n}")
    f = inst.flow.astype(np.float64)
    d = inst.dist.astype(np.float64)
    c = np.einsum("ij,pq->ijpq", f, d)
    c[~layout(n).valid] = 0.0
    # f_ii d_pp is a placement cost of i at p
    b = inst.linear.astype(np.float64) + np.outer(np.diag(f), np.diag(d))
    D = np.zeros((layout(n).tiles, n - 2, n - 2))
    return CoefficientStore(n, 0.0, b, c, D)


def store_objective(store: CoefficientStore, perm) -> float:
    """Right-hand side of the reparametrization identity for ``perm``."""
    n = store.n
    p = np.asarray(perm, dtype=np.int64)
    ar = np.arange(n)
    lin = store.b_mod[ar, p].sum()
    quad = store.c_mod[ar[:, None], ar[None, :], p[:, None], p[None, :]].sum()
    zero = np.zeros((store.d_mod.shape[0], n - 2))
    zsum, _ = K.induced_z(store.d_mod, zero, zero, p, n)
    return float(store.offset + lin + quad + zsum)


@dataclass
class AscentConfig:
    variant: str = "F1"
    sa_enabled: bool = False
    iter_limit: int = 200
    min_gap: float = 0.0
    kappa_z_upper: float = 2.0 / 3.0
    phi_split: float = 0.5
    kappa_y: float = 1.0
    kappa_x: float = 1.0
    varphi: float = 0.5
    sa_t0_fraction: float = 0.04
    sa_kappa_lb_cap: float = 0.25
    sa_cool_factor: float = 0.99
    sa_cool_period: int = 100
    # "literal": p = exp(-kappa / T); "scaled": p = exp(-kappa * bound / (n T)),
    # i.e. measured in the bound given up
    sa_accept: str = "literal"
    # Type 4 move: "x" (x cost shift) or "family" (z level)
    sa_move: str = "x"
    # where x slack goes: "tile" (into the z family of an upper y, mirror for
    # lower y) or "mirror" (always the mirrored y)
    type3_route: str = "tile"
    workers: int = 1
    seed: int = 0
    upper_bound: float | None = None
    early_stop_window: int = 0
    early_stop_delta: float = 0.0
    fathom_value: float | None = None
    check_feasibility: bool = True
    keep_best_store: bool = False

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("kappa_z_upper", "phi_split", "kappa_y", "kappa_x", "varphi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.iter_limit < 1:
            raise ValueError("iter_limit must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.sa_move not in ("family", "x"):
            raise ValueError("sa_move must be 'family' or 'x'")
        if self.sa_accept not in ("scaled", "literal"):
            raise ValueError("sa_accept must be 'scaled' or 'literal'")
        if self.type3_route not in ("tile", "mirror"):
            raise ValueError("type3_route must be 'tile' or 'mirror'")
        if self.sa_cool_period < 1 or not 0 < self.sa_cool_factor <= 1:
            raise ValueError("bad cooling schedule")

    @property
    def fast(self) -> bool:
        return self.variant[0] == "F"

    @property
    def two_phase(self) -> bool:
        return self.variant[1] == "2"


@dataclass
class AscentState:
    n: int
    iteration: int = 0
    bound: float = -math.inf
    best_bound: float = -math.inf
    theta: np.ndarray = None  # (tiles,) latest Z-LAP values
    delta: np.ndarray = None  # (n, n) latest Y-LAP values
    z_row: np.ndarray = None  # (tiles, n-2) xi
    z_col: np.ndarray = None  # (tiles, n-2) psi
    y_row: np.ndarray = None  # (n*n, n-1) gamma
    y_col: np.ndarray = None  # (n*n, n-1) delta potentials
    alpha: np.ndarray = None
    beta: np.ndarray = None
    pi_x: np.ndarray = None  # x slacks (slow mode; fast keeps them in b_mod)
    pi_y: np.ndarray = None  # y slacks (slow mode; fast keeps them in c_mod)
    y_dual_sum: np.ndarray = None  # gamma + delta spread on (i,j,p,q), slow mode
    x_assign: np.ndarray = None
    gap: float = math.inf
    temperature: float = 0.0
    upper_bound: float | None = None
    incumbent: np.ndarray = None
    incumbent_value: float = math.inf
    rng: np.random.Generator = None
    skipped_families: int = 0

    @classmethod
    def fresh(cls, n: int, cfg: AscentConfig) -> "AscentState":
        L = layout(n)
        T, m = L.tiles, n - 2
        return cls(
            n=n, theta=np.zeros(T), delta=np.zeros((n, n)),
            z_row=np.zeros((T, m)), z_col=np.zeros((T, m)),
            y_row=np.zeros((n * n, n - 1)), y_col=np.zeros((n * n, n - 1)),
            alpha=np.zeros(n), beta=np.zeros(n), pi_x=np.zeros((n, n)),
            pi_y=np.zeros((n, n, n, n)), y_dual_sum=np.zeros((n, n, n, n)),
            x_assign=np.arange(n), upper_bound=cfg.upper_bound,
            rng=np.random.default_rng(cfg.seed))

    def theta4(self) -> np.ndarray:
        L = layout(self.n)
        out = np.zeros((self.n,) * 4)
        out[L.ti, L.tj, L.tp, L.tq] = self.theta
        return out


@dataclass
class IterationRecord:
    iteration: int
    bound: float
    best_bound: float
    gap: float
    ms: dict


@dataclass
class BoundReport:
    instance: str
    variant: str
    sa_enabled: bool
    records: list = field(default_factory=list)
    final_bound: float = -math.inf
    termination: str = "iteration-limit"
    upper_bound: float | None = None
    certificate: list | None = None
    incumbent: list | None = None
    incumbent_value: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["records"] = [
            {"m": r.iteration, "bound": r.bound, "best": r.best_bound,
             "gap": None if math.isinf(r.gap) else r.gap, "ms": r.ms}
            for r in self.records]
        return json.dumps(d, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        stages = ["z", "z2", "y", "x", "update", "sa"]
        w.writerow(["m", "bound", "best", "gap"] + [f"ms_{s}" for s in stages])
        for r in self.records:
            w.writerow([r.iteration, repr(r.bound), repr(r.best_bound),
                        "" if math.isinf(r.gap) else repr(r.gap)]
                       + [f"{r.ms.get(s, 0.0):.3f}" for s in stages])
        return buf.getvalue()


# ---- stages ------------------------------------------------------------

def _slow_pi_y(store, state):
    L = layout(store.n)
    return np.where(L.valid, store.c_mod + state.theta4() - state.y_dual_sum, 0.0)


def stage_z(store: CoefficientStore, state: AscentState, cfg: AscentConfig,
            warm: bool = False) -> None:
    """Solve every Z-LAP. Fast mode reduces the tiles and folds the values
    into C; slow mode keeps the tiles and the potentials."""
    T = store.d_mod.shape[0]
    assign = np.empty(store.d_mod.shape[:2], np.int64)
    run_chunked(solve_tiles, T, cfg.workers, store.d_mod, state.z_row, state.z_col,
                state.theta, assign, warm and not cfg.fast)
    if cfg.fast:
        run_chunked(reduce_tiles, T, cfg.workers, store.d_mod, state.z_row, state.z_col)
        L = layout(store.n)
        store.c_mod[L.ti, L.tj, L.tp, L.tq] += state.theta


def redistribute_slack(slacks, tol: float = SLACK_TOL) -> np.ndarray:
    """Second-phase rule on one family: the change to each member's
    coefficient. Non-binding members (slack > tol) give up their slack and
    binding ones share the total evenly. No binding member, no change."""
    s = np.asarray(slacks, dtype=np.float64)
    nb_ = s > tol
    out = np.zeros_like(s)
    if not nb_.any() or nb_.all():
        return out
    out[nb_] = -s[nb_]
    out[~nb_] = s[nb_].sum() / (~nb_).sum()
    return out


def stage_z_second_phase(store: CoefficientStore, state: AscentState,
                         cfg: AscentConfig) -> None:
    L = layout(store.n)
    skipped = np.zeros(L.pairs, np.int64)
    before = state.theta.copy()
    run_chunked(K.second_phase, L.pairs, cfg.workers, store.d_mod, state.z_row,
                state.z_col, store.n, SLACK_TOL, L.pa, L.pb, skipped)
    state.skipped_families = int(skipped.sum())
    if state.skipped_families:
        log.debug("second phase: %d families with no binding member left as is",
                  state.skipped_families)
    stage_z(store, state, cfg, warm=True)
    if not cfg.fast:
        drop = (before - state.theta).max(initial=0.0)
        if drop > FEAS_TOL * (1 + np.abs(before).max(initial=0.0)):
            log.warning("second phase lowered a Z-LAP value by %.3e", drop)


def stage_y(store: CoefficientStore, state: AscentState, cfg: AscentConfig,
            balance: bool = True) -> None:
    """Balance y slacks against their mirrors, then solve the n^2 Y-LAPs."""
    n = store.n
    L = layout(n)
    c = store.c_mod
    if cfg.fast:
        if balance and cfg.varphi > 0:
            c += cfg.varphi * (c.transpose(1, 0, 3, 2) - c)
        ycost = c
    else:
        th = state.theta4()
        if balance and cfg.varphi > 0:
            pi = np.where(L.valid, c + th - state.y_dual_sum, 0.0)
            c += cfg.varphi * (pi.transpose(1, 0, 3, 2) - pi)
        ycost = c + th
    idx = L.y_index()
    stack = np.ascontiguousarray(ycost[idx].reshape(n * n, n - 1, n - 1))
    obj = np.empty(n * n)
    assign = np.empty((n * n, n - 1), np.int64)
    run_chunked(solve_tiles, n * n, cfg.workers, stack, state.y_row, state.y_col,
                obj, assign, False)
    state.delta = obj.reshape(n, n)
    red = (stack - state.y_row[:, :, None] - state.y_col[:, None, :]).reshape(
        n, n, n - 1, n - 1)
    if cfg.fast:
        c[idx] = red
    else:
        pi = np.zeros_like(c)
        pi[idx] = red
        state.pi_y = pi
        state.y_dual_sum = np.where(L.valid, ycost - pi, 0.0)


def stage_x(store: CoefficientStore, state: AscentState, cfg: AscentConfig) -> None:
    n = store.n
    cost = store.b_mod + state.delta
    u = np.empty(n)
    v = np.empty(n)
    col4row = np.empty(n, np.int64)
    _row_min_start(cost, u, v)
    hungarian(cost, u, v, col4row)
    state.alpha, state.beta, state.x_assign = u, v, col4row
    obj = u.sum() + v.sum()
    red = cost - u[:, None] - v[None, :]
    if cfg.fast:
        store.offset += obj
        store.b_mod = red
        state.bound = store.offset
    else:
        state.pi_x = red
        state.bound = store.offset + obj
    state.best_bound = max(state.best_bound, state.bound)
    ub = state.upper_bound
    state.gap = (ub - state.best_bound) / ub if ub else math.inf


def ascent_update(store: CoefficientStore, state: AscentState, cfg: AscentConfig) -> None:
    """Fold the previous iteration's slacks back into the store (Types 1-3)."""
    n = store.n
    L = layout(n)
    m = n - 2
    c = store.c_mod
    # Type 3: x slack of (i,p) reaches the mirrors (j,i,q,p) through y_ijpq
    pix = np.maximum(store.b_mod if cfg.fast else state.pi_x, 0.0)
    a = cfg.kappa_x * pix / (n - 1)
    own = a[:, None, :, None]
    mirror = a[None, :, None, :]
    if cfg.type3_route == "mirror":
        take = L.valid  # every y_ijpq passes its share to y_jiqp
    else:
        take = L.lower  # upper y keep it for their tile, lower ones pass it up
    if cfg.fast:
        store.b_mod = store.b_mod - cfg.kappa_x * pix
        c += np.where(L.valid & ~take, own, 0.0) + np.where(take.transpose(1, 0, 3, 2), mirror, 0.0)
        pi_y = c
    else:
        c += np.where(take.transpose(1, 0, 3, 2), mirror, 0.0) - np.where(take, own, 0.0)
        state.y_dual_sum -= np.where(L.valid, own, 0.0)
        state.pi_x = state.pi_x - cfg.kappa_x * pix
        pi_y = _slow_pi_y(store, state)
    # Type 2: upper y slack moves into its tile; Type 1 spreads z slack
    s = cfg.kappa_y * np.maximum(pi_y[L.ti, L.tj, L.tp, L.tq], 0.0)
    if cfg.fast:
        c[L.ti, L.tj, L.tp, L.tq] -= s
    run_chunked(K.family_update, L.pairs, cfg.workers, store.d_mod, state.z_row,
                state.z_col, s, n, cfg.kappa_z_upper, cfg.phi_split, not cfg.fast,
                L.pa, L.pb)
    if not cfg.fast:
        state.z_row -= (s / m)[:, None]


def sa_perturb(store: CoefficientStore, state: AscentState, cfg: AscentConfig) -> bool:
    """Type 4: with probability p_acc, give up a random share ``kappa`` of the
    bound, ``kappa_i * nu / n`` per facility row and ``kappa_p * nu / n`` per
    location column. Returns whether the move was accepted. Cools T every
    ``sa_cool_period`` calls.

    ``sa_move="family"`` takes the share out of every z coefficient whose
    facility pair contains i (location pair contains p) and hands it to the
    other members of the same family; ``"x"`` adds it to the x costs as a
    row/column shift that the next Type 3 step pushes down."""
    n = store.n
    accepted = False
    nu = state.bound
    if nu > 0 and state.temperature > 0:
        total = cfg.sa_kappa_lb_cap * state.rng.random()
        w = state.rng.random(2 * n)
        w *= total / w.sum()
        # moving kappa*nu/n per row and column costs kappa*nu/n of bound
        drop = total * nu / n
        energy = drop if cfg.sa_accept == "scaled" else total
        p_acc = math.exp(-energy / state.temperature)
        if state.rng.random() <= p_acc:
            accepted = True
            rows = w[:n] * nu / n
            cols = w[n:] * nu / n
            if cfg.sa_move == "family":
                _sa_family_move(store, state, cfg, rows, cols)
            elif cfg.fast:
                bump = rows[:, None] + cols[None, :]
                store.b_mod = store.b_mod + bump
                store.offset -= rows.sum() + cols.sum()
            else:
                state.pi_x = state.pi_x + rows[:, None] + cols[None, :]
    if state.iteration % cfg.sa_cool_period == 0:
        state.temperature *= cfg.sa_cool_factor
    return accepted


def _sa_family_move(store, state, cfg, rows, cols):
    # each facility meets (n-1)(n-2) induced z members, each location too
    n = store.n
    L = layout(n)
    m = n - 2
    per = 1.0 / ((n - 1) * m)
    e = (rows[L.ti] + rows[L.tj] + cols[L.tp] + cols[L.tq]) * per
    run_chunked(K.family_update, L.pairs, cfg.workers, store.d_mod, state.z_row,
                state.z_col, e * m, n, 0.0, cfg.phi_split, True, L.pa, L.pb)
    if not cfg.fast:
        state.z_row -= e[:, None]


def feasibility_check(state: AscentState, store: CoefficientStore,
                      inst: QapInstance | None = None):
    """Complementary-slackness test on the x, y, z induced by the X-LAP
    assignment. Returns ``(True, perm)`` when every induced slack is within
    tolerance (perm is then optimal), else ``(False, None)``."""
    n = store.n
    p = np.asarray(state.x_assign, dtype=np.int64)
    ar = np.arange(n)
    pix = state.pi_x
    piy = state.pi_y
    worst = max(pix[ar, p].max(), 0.0)
    off = ~np.eye(n, dtype=bool)
    worst = max(worst, piy[ar[:, None], ar[None, :], p[:, None], p[None, :]][off].max())
    _, wz = K.induced_z(store.d_mod, state.z_row, state.z_col, p, n)
    worst = max(worst, wz)
    if worst <= FEAS_TOL:
        if inst is not None:
            from .instance import evaluate_objective
            val = evaluate_objective(inst, p)
            if abs(val - state.bound) > 1e-6 * (1 + abs(val)):
                log.warning("certificate value %s differs from bound %s", val, state.bound)
        return True, p.copy()
    return False, None


# ---- driver ------------------------------------------------------------

def _sync_fast_views(store, state):
    """In fast mode the slacks live in the store; point the state at them."""
    state.pi_x = store.b_mod
    state.pi_y = store.c_mod


def run_ascent(inst: QapInstance | None, cfg: AscentConfig, warm=None,
               on_iteration=None):
    """Run the dual ascent. ``warm`` is a CoefficientStore or a
    ``(store, state)`` pair; the store is updated in place.

    Returns ``(report, store, state)``; with ``keep_best_store`` the returned
    store is the one in force at the best bound.
    """
    if warm is None:
        if inst is None:
            raise ValueError("need an instance or a warm store")
        store = init_coefficients(inst)
        state = AscentState.fresh(inst.n, cfg)
    elif isinstance(warm, tuple):
        store, state = warm
    else:
        store, state = warm, AscentState.fresh(warm.n, cfg)
    n = store.n
    if inst is not None and inst.n != n:
        raise ValueError(f"warm store has n={n}, instance has n={inst.n}")
    if n < 3:
        raise UnsupportedSize(f"RLT2 needs n >= 3, got {n}")
    L = layout(n)
    if store.d_mod.shape != (L.tiles, n - 2, n - 2) or store.c_mod.shape != (n,) * 4:
        raise ValueError("warm store does not match the tile layout for n")
    if cfg.upper_bound is not None:
        state.upper_bound = cfg.upper_bound
    report = BoundReport(getattr(inst, "name", ""), cfg.variant, cfg.sa_enabled,
                         upper_bound=state.upper_bound)
    best_store = None
    history = []
    start_iter = state.iteration
    for it in range(cfg.iter_limit):
        ms = {}
        first = state.iteration == start_iter
        t0 = time.perf_counter()
        if not first:
            ascent_update(store, state, cfg)
        t1 = time.perf_counter()
        ms["update"] = (t1 - t0) * 1e3
        stage_z(store, state, cfg, warm=not first)
        t2 = time.perf_counter()
        ms["z"] = (t2 - t1) * 1e3
        if cfg.two_phase and not first:
            stage_z_second_phase(store, state, cfg)
        t3 = time.perf_counter()
        ms["z2"] = (t3 - t2) * 1e3
        stage_y(store, state, cfg, balance=not first)
        t4 = time.perf_counter()
        ms["y"] = (t4 - t3) * 1e3
        prev_best = state.best_bound
        stage_x(store, state, cfg)
        if cfg.fast:
            _sync_fast_views(store, state)
        t5 = time.perf_counter()
        ms["x"] = (t5 - t4) * 1e3
        state.iteration += 1
        # the X-LAP assignment is a feasible QAP solution
        val = round(store_objective(store, state.x_assign))
        if val < state.incumbent_value:
            state.incumbent_value = float(val)
            state.incumbent = state.x_assign.copy()
        if state.upper_bound is None and cfg.sa_enabled:
            state.upper_bound = state.incumbent_value
            state.gap = (state.upper_bound - state.best_bound) / state.upper_bound \
                if state.upper_bound else math.inf
        if cfg.keep_best_store and state.best_bound > prev_best:
            best_store = store.copy()
        reason = None
        if cfg.check_feasibility:
            ok, perm = feasibility_check(state, store)
            if ok:
                report.certificate = perm.tolist()
                reason = "feasible-found"
        if reason is None and state.gap < cfg.min_gap:
            reason = "gap-closed"
        if (reason is None and cfg.fathom_value is not None
                and math.ceil(state.best_bound - FEAS_TOL) >= cfg.fathom_value):
            reason = "gap-closed"
        history.append(state.best_bound)
        w = cfg.early_stop_window
        if (reason is None and w and cfg.early_stop_delta > 0 and len(history) > w
                and history[-1] - history[-1 - w]
                < cfg.early_stop_delta * max(1.0, abs(history[-1]))):
            reason = "early-stop"
        if reason is None and it == cfg.iter_limit - 1:
            reason = "iteration-limit"
        t6 = time.perf_counter()
        if cfg.sa_enabled and reason is None:
            if state.iteration == start_iter + 1 and state.temperature == 0:
                ub = state.upper_bound if state.upper_bound else state.incumbent_value
                state.temperature = cfg.sa_t0_fraction * ub
            sa_perturb(store, state, cfg)
            if cfg.fast:
                _sync_fast_views(store, state)
        ms["sa"] = (time.perf_counter() - t6) * 1e3
        rec = IterationRecord(state.iteration, float(state.bound),
                              float(state.best_bound), float(state.gap), ms)
        report.records.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
        if reason is not None:
            report.termination = reason
            break
    report.final_bound = float(state.best_bound)
    report.upper_bound = state.upper_bound
    if state.incumbent is not None:
        report.incumbent = state.incumbent.tolist()
        report.incumbent_value = state.incumbent_value
    if cfg.keep_best_store and best_store is not None:
        store = best_store
    return report, store, state


# ---- restriction (branch-and-bound) ------------------------------------

def restrict_store(store: CoefficientStore, f: int, l: int) -> CoefficientStore:
    """Store of the subproblem with facility ``f`` fixed at location ``l``.

    Remaining facilities/locations keep their relative order. Terms that the
    fixing decides are folded down a level: b[f, l] into the offset, y pairs
    with (f, l) into b, and z triples with (f, l) into C. The result is again
    a valid reparametrization of the restricted objective.
    """
    n = store.n
    if n < 4:
        raise UnsupportedSize("restriction needs n >= 4 so the child has n >= 3")
    kf = np.delete(np.arange(n), f)
    kl = np.delete(np.arange(n), l)
    ix = np.ix_(kf, kl)
    c = store.c_mod
    b = store.b_mod[ix] + c[f, :, l, :][ix] + c[:, f, :, l][ix]
    cnew = np.ascontiguousarray(c[np.ix_(kf, kf, kl, kl)])
    K.fixed_z_to_y(store.d_mod, n, f, l, cnew)
    n1 = n - 1
    D = np.empty((layout(n1).tiles, n1 - 2, n1 - 2))
    K.restrict_tiles(store.d_mod, n, f, l, D)
    return CoefficientStore(n1, store.offset + float(store.b_mod[f, l]), b, cnew, D)


def subproblem_store(inst: QapInstance, fixed) -> CoefficientStore:
    """Fresh store (zero multipliers) for ``inst`` with the ``(facility,
    location)`` pairs in ``fixed`` placed. Free facilities and locations
    keep their original order."""
    n = inst.n
    ff = np.array([i for i, _ in fixed], dtype=np.int64)
    fl = np.array([p for _, p in fixed], dtype=np.int64)
    kf = np.setdiff1d(np.arange(n), ff)
    kl = np.setdiff1d(np.arange(n), fl)
    if len(kf) < 3:
        raise UnsupportedSize("subproblem needs at least 3 free facilities")
    f = inst.flow.astype(np.float64)
    d = inst.dist.astype(np.float64)
    lin = inst.linear.astype(np.float64) + np.outer(np.diag(f), np.diag(d))
    offset = float(lin[ff, fl].sum())
    if len(ff):
        ffm = f[np.ix_(ff, ff)].copy()
        np.fill_diagonal(ffm, 0.0)
        offset += float((ffm * d[np.ix_(fl, fl)]).sum())
        b = (lin[np.ix_(kf, kl)] + f[np.ix_(kf, ff)] @ d[np.ix_(fl, kl)]
             + (f[np.ix_(ff, kf)].T @ d[np.ix_(kl, fl)].T))
    else:
        b = lin[np.ix_(kf, kl)]
    sub = QapInstance(len(kf), inst.flow[np.ix_(kf, kf)], inst.dist[np.ix_(kl, kl)])
    store = init_coefficients(sub)
    store.b_mod = b
    store.offset = offset
    return store
