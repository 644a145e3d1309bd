"""Print the bound after selected iterations for one or more ascent variants.

    python3 scripts/bound_trajectory.py nug20 --iters 200 --variants F1 S1 F2 S2
    python3 scripts/bound_trajectory.py nug20 --iters 2000 --variants F1 --sa
"""
import argparse
import time

from rlt2qap.engine import AscentConfig, run_ascent
from rlt2qap.instance import load_fixture

CHECKPOINTS = (1, 10, 25, 50, 100, 200, 500, 1000, 1500, 2000)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("fixture")
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--variants", nargs="+", default=["F1"])
    ap.add_argument("--sa", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--min-gap", type=float, default=0.0)
    args = ap.parse_args()
    inst, _, ub = load_fixture(args.fixture)
    for v in args.variants:
        cfg = AscentConfig(variant=v, iter_limit=args.iters, sa_enabled=args.sa, seed=args.seed,
                           upper_bound=ub, min_gap=args.min_gap)
        t0 = time.perf_counter()
        rep, _, _ = run_ascent(inst, cfg)
        pts = {r.iteration: r.bound for r in rep.records}
        row = "  ".join(f"{m}:{pts[m]:.2f}" for m in CHECKPOINTS if m in pts)
        print(f"{v}{'+SA' if args.sa else ''}  {row}  final {rep.final_bound:.2f} "
              f"({rep.termination}, {len(rep.records)} it, {time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
