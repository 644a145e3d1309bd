"""Command line: ``rlt2qap {lb,solve,lap,gen} ...``.

Exit codes: 0 success, 1 an internal invariant check failed, 2 bad input or
flags, 3 snapshot capacity exceeded.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bnb import BnbConfig, CapacityError, solve
from .engine import AscentConfig, UnsupportedSize, run_ascent
from .instance import (ParseError, ValidationError, evaluate_objective, generate_instance,
                       read_instance, read_solution, serialize_qaplib, serialize_solution)
from .lap import LapBatch, LapProblem, check_result, solve_batch, solve_lap

log = logging.getLogger("rlt2qap")


def fmt_duration(seconds: float) -> str:
    """``d:hh:mm:ss``."""
    s = int(round(seconds))
    d, s = divmod(s, 86400)
    h, s = divmod(s, 3600)
    m, s = divmod(s, 60)
    return f"{d}:{h:02d}:{m:02d}:{s:02d}"


def percent_gap(ub: float | None, lb: float) -> float | None:
    if not ub:
        return None
    return 100.0 * (ub - lb) / ub


def _load(args):
    path = Path(args.instance)
    if not path.exists():
        raise FileNotFoundError(f"instance file {path} does not exist")
    inst = read_instance(path, swap=args.swap)
    sln = path.with_suffix(".sln")
    known = None
    if sln.exists():
        known = read_solution(sln, swap=args.swap)
        if evaluate_objective(inst, known[0]) != known[1]:
            log.warning("%s does not evaluate to its declared value; ignoring it", sln)
            known = None
    return inst, known


def _write(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_lb(args) -> int:
    inst, known = _load(args)
    ub = args.ub if args.ub is not None else (known[1] if known else None)
    cfg = AscentConfig(variant=args.variant, sa_enabled=args.sa, iter_limit=args.iters,
                       min_gap=args.min_gap, workers=args.workers, seed=args.seed,
                       upper_bound=ub, type3_route=args.type3_route,
                       sa_accept=args.sa_accept, sa_move=args.sa_move)
    t0 = time.perf_counter()
    report, _, _ = run_ascent(inst, cfg)
    wall = time.perf_counter() - t0
    if not args.timings:
        for r in report.records:
            r.ms = {}
    _write(report.to_json() if args.format == "json" else report.to_csv(), args.output)
    lb = report.final_bound
    gap = percent_gap(ub, lb)
    print(f"{inst.name} {cfg.variant}{'+SA' if cfg.sa_enabled else ''}: "
          f"LB {lb:.4f} after {len(report.records)} iterations ({report.termination})"
          + (f", UB {ub}, %GAP {gap:.4f}" if gap is not None else "")
          + (f", time {fmt_duration(wall)}" if args.timings else ""), file=sys.stderr)
    return 0


def cmd_solve(args) -> int:
    inst, known = _load(args)
    perm = tuple(known[0].assign) if known and args.ub is None else None
    ub = args.ub if args.ub is not None else (known[1] if known else None)
    cfg = BnbConfig(banks=args.banks, workers_per_bank=args.workers, l_init=args.l_init,
                    branch_rule=args.rule, max_depth=args.depth,
                    node_iter_limit=args.iters, symmetry_elimination=not args.no_symmetry,
                    incumbent=ub, incumbent_perm=perm, variant=args.variant,
                    sa_enabled=not args.no_sa, seed=args.seed, log_path=args.log)
    try:
        res = solve(inst, cfg)
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return 3
    if evaluate_objective(inst, res.certificate) != res.value:
        print("certificate does not evaluate to the reported value", file=sys.stderr)
        return 1
    d = json.loads(res.to_json())
    if not args.timings:
        d.pop("wall_time")
        d.pop("utilization")
    else:
        d["time"] = fmt_duration(res.wall_time)
    _write(json.dumps(d, sort_keys=True), args.output)
    print(f"{inst.name}: optimum {res.value}, nodes {res.nodes_explored} "
          f"(seeded {res.nodes_seeded})"
          + (f", time {fmt_duration(res.wall_time)}" if args.timings else ""),
          file=sys.stderr)
    if args.solution:
        Path(args.solution).write_text(serialize_solution(res.certificate, res.value))
    return 0


def _read_matrix(path: str) -> np.ndarray:
    rows = [[float(x) for x in line.split()] for line in Path(path).read_text().splitlines()
            if line.strip()]
    if len(rows) > 1 and len(rows[0]) == 1 and int(rows[0][0]) == len(rows) - 1:
        rows = rows[1:]
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ParseError(f"{path}: expected a square matrix, got shape {arr.shape}")
    return arr


def _brute(cost: np.ndarray) -> float:
    m = cost.shape[0]
    rows = np.arange(m)
    return min(cost[rows, list(p)].sum() for p in itertools.permutations(range(m)))


def cmd_lap(args) -> int:
    if args.matrix:
        costs = _read_matrix(args.matrix)[None]
    else:
        rng = np.random.default_rng(args.seed)
        costs = rng.integers(0, args.max_value + 1, size=(args.count, args.m, args.m)).astype(float)
    t0 = time.perf_counter()
    results = (solve_batch(LapBatch(costs), args.workers) if len(costs) > 1
               else [solve_lap(LapProblem(costs[0]))])
    ms = (time.perf_counter() - t0) * 1e3
    bad, matches = [], 0
    for t, r in enumerate(results):
        for msg in check_result(LapProblem(costs[t]), r):
            bad.append(f"problem {t}: {msg}")
        if args.oracle and costs.shape[1] <= 9:
            if abs(_brute(costs[t]) - r.objective) <= 1e-9 * (1 + abs(r.objective)):
                matches += 1
            else:
                bad.append(f"problem {t}: objective {r.objective} differs from enumeration")
    out = {"count": len(results), "m": int(costs.shape[1]),
           "objectives": [r.objective for r in results]}
    if len(results) == 1:
        out["assignment"] = results[0].assignment.tolist()
    if args.oracle:
        out["oracle_matches"] = f"{matches}/{len(results)}"
    if args.timings:
        out["ms"] = ms
    _write(json.dumps(out, sort_keys=True), args.output)
    for b in bad:
        print(b, file=sys.stderr)
    return 1 if bad else 0


def cmd_gen(args) -> int:
    inst = generate_instance(args.n, args.seed, args.max_value)
    _write(serialize_qaplib(inst), args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlt2qap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, instance=True):
        if instance:
            sp.add_argument("instance", help="QAPLIB instance file")
            sp.add_argument("--swap", action="store_true",
                            help="treat the first matrix as distance instead of flow")
            sp.add_argument("--ub", type=float, default=None,
                            help="upper bound (default: value in a sibling .sln file)")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-o", "--output", default=None)
        sp.add_argument("--timings", action="store_true",
                        help="include wall-clock timings (reports are then not reproducible)")

    lb = sub.add_parser("lb", help="lower bound by dual ascent")
    common(lb)
    lb.add_argument("--variant", default="F1", type=str.upper, choices=["F1", "F2", "S1", "S2"])
    lb.add_argument("--sa", action="store_true", help="enable simulated annealing")
    lb.add_argument("--iters", type=int, default=200)
    lb.add_argument("--min-gap", type=float, default=0.0)
    lb.add_argument("--format", choices=["json", "csv"], default="json")
    lb.add_argument("--type3-route", choices=["tile", "mirror"], default="tile")
    lb.add_argument("--sa-accept", choices=["literal", "scaled"], default="literal")
    lb.add_argument("--sa-move", choices=["x", "family"], default="x")
    lb.set_defaults(func=cmd_lb)

    so = sub.add_parser("solve", help="exact branch-and-bound")
    common(so)
    so.add_argument("--variant", default="F1", type=str.upper, choices=["F1", "F2", "S1", "S2"])
    so.add_argument("--no-sa", action="store_true")
    so.add_argument("--iters", type=int, default=500, help="ascent iterations per node")
    so.add_argument("--banks", type=int, default=1)
    so.add_argument("--l-init", type=int, default=0)
    so.add_argument("--depth", type=int, default=5)
    so.add_argument("--rule", type=int, choices=[1, 2, 3], default=3)
    so.add_argument("--no-symmetry", action="store_true")
    so.add_argument("--log", default=None, help="JSON-lines node log")
    so.add_argument("--solution", default=None, help="write the certificate as a .sln file")
    so.set_defaults(func=cmd_solve)

    lp = sub.add_parser("lap", help="solve and verify linear assignment problems")
    common(lp, instance=False)
    lp.add_argument("--matrix", default=None, help="square cost matrix file")
    lp.add_argument("--m", type=int, default=8)
    lp.add_argument("--count", type=int, default=1)
    lp.add_argument("--max-value", type=int, default=100)
    lp.add_argument("--oracle", action="store_true", help="compare against enumeration (m <= 9)")
    lp.set_defaults(func=cmd_lap)

    gn = sub.add_parser("gen", help="write a seeded random instance")
    gn.add_argument("n", type=int)
    gn.add_argument("--seed", type=int, default=0)
    gn.add_argument("--max-value", type=int, default=10)
    gn.add_argument("-o", "--output", default=None)
    gn.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ParseError, ValidationError, FileNotFoundError, UnsupportedSize, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
