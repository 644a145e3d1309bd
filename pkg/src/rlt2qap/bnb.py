"""Parallel branch-and-bound over polytomic facility-placement nodes.

A node fixes the first ``level`` facilities of the branching order; its
children place the next facility at every free location. Nodes are bounded
with the dual ascent on the restricted problem, warm-started from the
parent's folded coefficients when the parent is close enough above.

The master list is a heap of nodes by bound (best-first seeding); each bank
pulls one node and explores below it depth-first. Banks are threads; the
numba kernels drop the GIL, so they overlap on multi-core hosts.
"""
from __future__ import annotations

import dataclasses
import heapq
import itertools
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import (AscentConfig, CoefficientStore, FEAS_TOL, layout, restrict_store,
                     run_ascent, subproblem_store)
from .instance import Permutation, QapInstance, evaluate_objective, grid_shape

log = logging.getLogger(__name__)


class CapacityError(MemoryError):
    pass


@dataclass
class BnbConfig:
    banks: int = 1
    workers_per_bank: int = 1
    l_init: int = 0
    branch_rule: int = 3
    max_depth: int = 5
    early_stop_window: int = 25
    early_stop_delta: float = 0.0002
    rebalance_period: float = 300.0
    rebalance_on_idle: bool = True
    node_iter_limit: int = 500
    symmetry_elimination: bool = True
    incumbent: float | None = None
    incumbent_perm: tuple | None = None
    variant: str = "F1"
    sa_enabled: bool = True
    seed: int = 0
    enumerate_below: int = 3
    snapshot_limit_bytes: int = 2 << 30
    log_path: str | None = None

    def __post_init__(self):
        if self.banks < 1 or self.workers_per_bank < 1:
            raise ValueError("banks and workers_per_bank must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.branch_rule not in (1, 2, 3):
            raise ValueError("branch_rule must be 1, 2 or 3")
        if self.l_init < 0:
            raise ValueError("l_init must be >= 0")


@dataclass
class BnbNode:
    id: int
    level: int
    fixed: tuple = ()
    bound: float = -math.inf
    warm_ref: CoefficientStore | None = None
    depth: int = 0  # levels below the node its bank started from

    def __post_init__(self):
        if len(self.fixed) != self.level:
            raise ValueError("fixed must have exactly `level` entries")
        fs = [i for i, _ in self.fixed]
        ls = [p for _, p in self.fixed]
        if len(set(fs)) != len(fs) or len(set(ls)) != len(ls):
            raise ValueError("fixed facilities and locations must be distinct")

    def __lt__(self, other):
        return (self.bound, self.id) < (other.bound, other.id)


@dataclass
class BnbResult:
    value: int
    certificate: Permutation
    nodes_explored: int
    nodes_seeded: int
    utilization: list
    wall_time: float
    fathomed: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "value": self.value, "permutation": list(self.certificate.assign),
            "permutation_qaplib": self.certificate.to_qaplib(),
            "nodes": self.nodes_explored, "seeded": self.nodes_seeded,
            "utilization": self.utilization, "wall_time": self.wall_time,
            "fathomed": self.fathomed}, sort_keys=True)


# ---- branching order and symmetry --------------------------------------

def branching_order(inst: QapInstance, rule: int) -> list[int]:
    """Rule 1: identity. Rule 2: greedily most interacting facility first
    (row+column flow sums, then interaction with the placed set). Rule 3:
    same with least interacting. Ties go to the lowest index."""
    n = inst.n
    if rule == 1:
        return list(range(n))
    if rule not in (2, 3):
        raise ValueError("rule must be 1, 2 or 3")
    f = inst.flow
    pair = f + f.T
    np.fill_diagonal(pair, 0)
    sign = 1 if rule == 2 else -1
    total = pair.sum(axis=1)
    first = min(range(n), key=lambda i: (-sign * total[i], i))
    order = [first]
    left = set(range(n)) - {first}
    while left:
        nxt = min(left, key=lambda i: (-sign * pair[i, order].sum(), i))
        order.append(nxt)
        left.remove(nxt)
    return order


def location_automorphisms(inst: QapInstance) -> list[np.ndarray]:
    """Grid symmetries of the location side that also fix the linear term.
    Only rectangular Manhattan grids are recognised; otherwise just the
    identity is returned."""
    n = inst.n
    ident = np.arange(n)
    shape = grid_shape(inst.dist)
    if shape is None:
        return [ident]
    R, C = shape
    r, c = ident // C, ident % C
    cands = [(r, c), (R - 1 - r, c), (r, C - 1 - c), (R - 1 - r, C - 1 - c)]
    if R == C:
        cands += [(c, r), (R - 1 - c, r), (c, C - 1 - r), (R - 1 - c, C - 1 - r)]
    out = []
    for rr, cc in cands:
        sig = rr * C + cc
        if (np.array_equal(inst.dist[np.ix_(sig, sig)], inst.dist)
                and np.array_equal(inst.linear[:, sig], inst.linear)
                and not any(np.array_equal(sig, g) for g in out)):
            out.append(sig)
    return out


def child_locations(fixed, n: int, group: list[np.ndarray]) -> list[int]:
    """Free locations for the next placement, one per orbit of the subgroup
    that keeps every already-fixed location in place."""
    used = [p for _, p in fixed]
    stab = [g for g in group if all(g[p] == p for p in used)]
    free = [p for p in range(n) if p not in used]
    reps, seen = [], set()
    for p in free:
        if p in seen:
            continue
        reps.append(p)
        seen.update(int(g[p]) for g in stab)
    return reps


def enumerate_seeds(n: int, order, l_init: int, group) -> list[tuple]:
    """All level-``l_init`` fixings (after symmetry pruning)."""
    if not 0 <= l_init < max(n, 1):
        raise ValueError("need 0 <= l_init < n")
    level = [()]
    for k in range(l_init):
        level = [fx + ((order[k], p),) for fx in level for p in child_locations(fx, n, group)]
    return level


def rebalance(queues: list[list[BnbNode]], idle: list[int]) -> list[list[BnbNode]]:
    """Pool every bank's unexplored nodes and deal them round-robin by
    ascending bound. A no-op when no bank is idle."""
    if not idle:
        return queues
    pool = sorted(itertools.chain.from_iterable(queues))
    out = [[] for _ in queues]
    for k, node in enumerate(pool):
        out[k % len(queues)].append(node)
    return out


# ---- solver ------------------------------------------------------------

class _Solver:
    def __init__(self, inst: QapInstance, cfg: BnbConfig):
        self.inst = inst
        self.cfg = cfg
        self.n = inst.n
        self.order = branching_order(inst, cfg.branch_rule)
        self.group = (location_automorphisms(inst) if cfg.symmetry_elimination
                      else [np.arange(self.n)])
        self.lock = threading.RLock()
        self.cond = threading.Condition(self.lock)
        self.ids = itertools.count()
        self.master: list[BnbNode] = []
        self.queues: list[list[BnbNode]] = [[] for _ in range(cfg.banks)]
        self.idle: set[int] = set()
        self.busy = [0.0] * cfg.banks
        self.explored = 0
        self.fathomed: dict[str, int] = {}
        self.best_perm = None
        self.best_value = math.inf
        self.ub_given = None
        self.last_rebalance = time.perf_counter()
        self.logf = open(cfg.log_path, "w") if cfg.log_path else None
        if cfg.incumbent_perm is not None:
            p = np.asarray(cfg.incumbent_perm, dtype=np.int64)
            self.best_perm, self.best_value = p, evaluate_objective(inst, p)
        if cfg.incumbent is not None and cfg.incumbent < self.best_value:
            self.ub_given = int(math.floor(cfg.incumbent))
        self._check_capacity()

    def _check_capacity(self):
        free = self.n - self.cfg.l_init - 1
        if free < 4:
            return
        per = (layout(free).tiles * (free - 2) ** 2 + free ** 4 + free ** 2) * 8
        need = self.cfg.max_depth * free * per * self.cfg.banks
        if need > self.cfg.snapshot_limit_bytes:
            raise CapacityError(
                f"warm-start snapshots need about {need / 2**30:.1f} GiB "
                f"(> {self.cfg.snapshot_limit_bytes / 2**30:.1f} GiB); "
                f"lower max_depth or raise l_init")

    # fathoming threshold: no better solution can be hidden below a node whose
    # rounded bound reaches it
    @property
    def threshold(self) -> float:
        t = self.best_value
        if self.ub_given is not None:
            t = min(t, self.ub_given + 1)
        return t

    def _log(self, **ev):
        if self.logf:
            with self.lock:
                self.logf.write(json.dumps(ev, sort_keys=True) + "\n")

    def _offer(self, perm, value):
        with self.lock:
            if value < self.best_value:
                self.best_value = value
                self.best_perm = np.asarray(perm, dtype=np.int64).copy()
                self._log(event="incumbent", value=int(value))

    def _fathom(self, node, reason):
        with self.lock:
            self.fathomed[reason] = self.fathomed.get(reason, 0) + 1
        self._log(event="close", id=node.id, level=node.level,
                  bound=node.bound, reason=reason)

    def _complete(self, fixed, tail_locs):
        perm = np.empty(self.n, np.int64)
        for i, p in fixed:
            perm[i] = p
        for i, p in zip(self.free_facilities(fixed), tail_locs):
            perm[i] = p
        return perm

    def free_facilities(self, fixed):
        used = {i for i, _ in fixed}
        return [i for i in range(self.n) if i not in used]

    def partial_cost(self, fixed) -> int:
        ff = np.array([i for i, _ in fixed], dtype=np.int64)
        fl = np.array([p for _, p in fixed], dtype=np.int64)
        inst = self.inst
        return int((inst.flow[np.ix_(ff, ff)] * inst.dist[np.ix_(fl, fl)]).sum()
                   + inst.linear[ff, fl].sum())

    def bound_node(self, node: BnbNode, parent_store=None, parent_fixed=None):
        """Bound ``node``; returns the store to warm-start its children, or
        None when the node is closed."""
        with self.lock:
            self.explored += 1
        self._log(event="open", id=node.id, level=node.level, bound=node.bound)
        free_f = self.free_facilities(node.fixed)
        used_l = {p for _, p in node.fixed}
        free_l = [p for p in range(self.n) if p not in used_l]
        if len(free_f) <= self.cfg.enumerate_below:
            best = math.inf
            for tail in itertools.permutations(free_l):
                perm = self._complete(node.fixed, tail)
                v = evaluate_objective(self.inst, perm)
                best = min(best, v)
                self._offer(perm, v)
            node.bound = best
            self._fathom(node, "enumerated")
            return None
        if self.inst.nonnegative and node.level:
            pc = self.partial_cost(node.fixed)
            if pc >= self.threshold:
                node.bound = max(node.bound, pc)
                self._fathom(node, "partial-cost")
                return None
        if parent_store is not None:
            f, l = node.fixed[-1]
            pf = self.free_facilities(parent_fixed)
            pl = [p for p in range(self.n) if p not in {q for _, q in parent_fixed}]
            store = restrict_store(parent_store, pf.index(f), pl.index(l))
        else:
            store = subproblem_store(self.inst, node.fixed)
        thr = self.threshold
        acfg = AscentConfig(
            variant=self.cfg.variant, sa_enabled=self.cfg.sa_enabled,
            iter_limit=self.cfg.node_iter_limit, workers=self.cfg.workers_per_bank,
            seed=self.cfg.seed + node.id,
            upper_bound=None if math.isinf(thr) else float(thr),
            early_stop_window=self.cfg.early_stop_window,
            early_stop_delta=self.cfg.early_stop_delta,
            fathom_value=None if math.isinf(thr) else thr,
            keep_best_store=self.cfg.sa_enabled)
        if not math.isinf(thr) and thr <= 0 and self.cfg.sa_enabled:
            acfg.sa_enabled = False
        rep, store, _ = run_ascent(None, acfg, warm=store)
        if rep.incumbent is not None:
            perm = self._complete(node.fixed, [free_l[k] for k in rep.incumbent])
            self._offer(perm, evaluate_objective(self.inst, perm))
        node.bound = max(node.bound, rep.final_bound)
        if rep.termination == "feasible-found":
            self._fathom(node, "certified")
            return None
        if math.ceil(node.bound - FEAS_TOL) >= self.threshold:
            self._fathom(node, "bound")
            return None
        return store

    def branch(self, node: BnbNode) -> list[BnbNode]:
        nxt = self.order[node.level]
        out = []
        for p in child_locations(node.fixed, self.n, self.group):
            out.append(BnbNode(next(self.ids), node.level + 1,
                               node.fixed + ((nxt, p),), node.bound))
        return out

    def expand(self, node: BnbNode, store) -> list[BnbNode]:
        """Bound every child of ``node``; return the survivors with their
        own stores attached where the depth cap allows."""
        kids = []
        for child in self.branch(node):
            child.depth = node.depth + 1
            cs = self.bound_node(child, store, node.fixed)
            if cs is not None:
                child.warm_ref = cs if child.depth < self.cfg.max_depth else None
                kids.append(child)
        return kids

    # -- bank loop --
    def _pull(self, bank):
        """Next node for ``bank``: own stack first, then the master heap.
        Blocks while other banks may still produce work."""
        with self.cond:
            while True:
                q = self.queues[bank]
                if q:
                    self.idle.discard(bank)
                    return q.pop()
                if self.master:
                    self.idle.discard(bank)
                    node = heapq.heappop(self.master)
                    node.depth = 0
                    return node
                self.idle.add(bank)
                if len(self.idle) == self.cfg.banks:
                    self.cond.notify_all()
                    return None
                now = time.perf_counter()
                if (self.cfg.rebalance_on_idle
                        or now - self.last_rebalance >= self.cfg.rebalance_period):
                    if any(len(x) > 1 for x in self.queues):
                        self.queues = rebalance(self.queues, sorted(self.idle))
                        for x in self.queues:
                            x.sort(reverse=True)
                        self.last_rebalance = now
                        self._log(event="rebalance", sizes=[len(x) for x in self.queues])
                        continue
                self.cond.wait(timeout=0.05)

    def _bank(self, bank):
        while True:
            node = self._pull(bank)
            if node is None:
                return
            t0 = time.perf_counter()
            if math.ceil(node.bound - FEAS_TOL) >= self.threshold:
                self._fathom(node, "bound")
            else:
                store = node.warm_ref
                node.warm_ref = None
                if store is None:
                    store = self.bound_node(node)
                if store is not None:
                    kids = self.expand(node, store)
                    with self.cond:
                        deep = [k for k in kids if k.warm_ref is None]
                        for k in deep:
                            heapq.heappush(self.master, k)
                        near = sorted((k for k in kids if k.warm_ref is not None),
                                      reverse=True)
                        self.queues[bank].extend(near)
                        self.cond.notify_all()
            self.busy[bank] += time.perf_counter() - t0

    def run(self) -> BnbResult:
        t0 = time.perf_counter()
        seeds = enumerate_seeds(self.n, self.order, self.cfg.l_init, self.group)
        for fx in seeds:
            node = BnbNode(next(self.ids), len(fx), fx)
            store = self.bound_node(node)
            if store is not None:
                node.warm_ref = store if self.cfg.max_depth > 0 else None
                heapq.heappush(self.master, node)
        if self.cfg.banks == 1:
            self._bank(0)
        else:
            threads = [threading.Thread(target=self._bank, args=(b,), daemon=True)
                       for b in range(self.cfg.banks)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        wall = time.perf_counter() - t0
        if self.logf:
            self.logf.close()
        if self.best_perm is None:
            raise RuntimeError("search finished without a feasible solution; "
                               "the supplied incumbent is below the optimum")
        return BnbResult(int(self.best_value), Permutation(self.best_perm.tolist()),
                         self.explored, len(seeds),
                         [b / wall if wall > 0 else 0.0 for b in self.busy], wall,
                         dict(self.fathomed))


def solve(inst: QapInstance, cfg: BnbConfig | None = None) -> BnbResult:
    """Exact optimum of ``inst`` with a certifying permutation."""
    cfg = cfg or BnbConfig()
    n = inst.n
    if n <= max(cfg.enumerate_below, 3):
        best, arg = math.inf, None
        for p in itertools.permutations(range(n)):
            v = evaluate_objective(inst, p)
            if v < best:
                best, arg = v, p
        return BnbResult(int(best), Permutation(arg), 1, 1, [1.0] * cfg.banks, 0.0,
                         {"enumerated": 1})
    # symmetry is found on the location side; a grid on the flow side is
    # handled by solving with the roles swapped
    flip = (cfg.symmetry_elimination and grid_shape(inst.dist) is None
            and grid_shape(inst.flow) is not None)
    work = inst.transposed() if flip else inst
    wcfg = cfg
    if flip and cfg.incumbent_perm is not None:
        wcfg = dataclasses.replace(cfg, incumbent_perm=tuple(np.argsort(cfg.incumbent_perm).tolist()))
    res = _Solver(work, wcfg).run()
    if flip:
        res.certificate = res.certificate.inverse()
    if evaluate_objective(inst, res.certificate) != res.value:
        raise RuntimeError("certificate does not evaluate to the reported optimum")
    return res
