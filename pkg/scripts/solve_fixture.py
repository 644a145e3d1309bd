"""Solve a bundled fixture exactly and compare with its known optimum.

    python3 scripts/solve_fixture.py nug12 --banks 4
"""
import argparse

from rlt2qap.bnb import BnbConfig, solve
from rlt2qap.cli import fmt_duration
from rlt2qap.instance import load_fixture


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("fixture", nargs="?", default="nug12")
    ap.add_argument("--banks", type=int, default=4)
    ap.add_argument("--l-init", type=int, default=0)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--log", default=None)
    ap.add_argument("--with-ub", action="store_true", help="start from the known optimum")
    args = ap.parse_args()
    inst, perm, opt = load_fixture(args.fixture)
    cfg = BnbConfig(banks=args.banks, l_init=args.l_init, node_iter_limit=args.iters,
                    log_path=args.log,
                    incumbent=opt if args.with_ub else None,
                    incumbent_perm=tuple(perm.assign) if args.with_ub else None)
    res = solve(inst, cfg)
    print(f"{args.fixture}: {res.value} (known {opt}), nodes {res.nodes_explored}, "
          f"time {fmt_duration(res.wall_time)}, utilization "
          + " ".join(f"{u:.2f}" for u in res.utilization))
    print("fathomed:", res.fathomed)


if __name__ == "__main__":
    main()
