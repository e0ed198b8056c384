"""Throughput around a semantic shift: probe vs a placement planned once from history.

    python scripts/robustness.py --csv robustness.csv
"""

import argparse
import sys
import time

from epbalance.pipeline_sim import run_experiment
from epbalance.scenarios import reference_spec, robustness_script


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--shift", type=int, default=200)
    ap.add_argument("--warmup", type=int, default=100)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)

    script = robustness_script(steps=args.steps, shift_events=((args.shift, 12345),))
    t0 = time.perf_counter()
    res = run_experiment(script, reference_spec(), warmup=args.warmup)
    print(f"{args.steps} steps in {time.perf_counter() - t0:.1f}s")
    for m in ("baseline", "probe", "one_shot_history"):
        pre = res.mean_throughput(m, args.warmup, args.shift)
        post = res.mean_throughput(m, args.shift)
        print(f"{m:17s} pre {pre:.4g} tok/s  post {post:.4g} tok/s  ({post / pre - 1:+.1%})")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write(res.to_csv())
    return 0


if __name__ == "__main__":
    sys.exit(main())
