"""Probe vs baseline step latency per regime, and throughput over batch sizes.

    python scripts/speedup_sweep.py --steps 6 --csv sweep.csv
"""

import argparse
import sys

import numpy as np

from epbalance.pipeline_sim import batch_sweep, run_experiment, sweep_csv
from epbalance.scenarios import reference_spec
from epbalance.workload import WorkloadScript

REGIMES = {
    # prefill layers carry long-sequence attention, so the hiding window is wider
    "prefill_burst": (reference_spec(attention_duration=1.5e-3), dict(tokens_per_step=16384)),
    "repeat_skew": (reference_spec(), dict(tokens_per_step=4096)),
    "decode_churn": (reference_spec(), dict(tokens_per_step=4096, churn_rate=0.02)),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--steps", type=int, default=6)
    ap.add_argument("--layers", type=int, default=6)
    ap.add_argument("--batches", default="1024,2048,4096,8192,16384")
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)

    for name, (spec, kw) in REGIMES.items():
        sc = WorkloadScript(regime=name, steps=args.steps, num_layers=args.layers, seed=1, **kw)
        res = run_experiment(sc, spec, modes=("baseline", "probe"))
        speed = np.mean(res.latency["baseline"]) / np.mean(res.latency["probe"])
        print(f"{name:14s} {kw['tokens_per_step']:6d} tokens/step  speedup {speed:.3f}x  "
              f"exposed {max(res.exposed):.3g}s")

    spec, kw = REGIMES["prefill_burst"]
    sc = WorkloadScript(regime="prefill_burst", steps=args.steps, num_layers=args.layers, seed=1, **kw)
    rows = batch_sweep(sc, spec, [int(b) for b in args.batches.split(",")], steps=min(args.steps, 2))
    for r in rows:
        print(f"batch {r['batch']:6d}: baseline {r['baseline_throughput']:.4g}  probe {r['probe_throughput']:.4g}  "
              f"({r['speedup']:.3f}x)")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write(sweep_csv(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
