"""Per-layer imbalance before and after planning on the 35-layer calibrated scenario.

    python scripts/layered_imbalance.py --csv layered.csv
"""

import argparse
import csv
import sys
import time

import numpy as np

from epbalance.metrics import imbalance_ratio, rank_loads
from epbalance.perf_model import exposed_overhead, layer_compute_latency, rank_compute_latency
from epbalance.pipeline_sim import default_windows
from epbalance.planner import init_locality_first, plan
from epbalance.scenarios import layered_imbalance, reference_spec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--layers", type=int, default=35)
    ap.add_argument("--target-ir", type=float, default=2.13)
    ap.add_argument("--tokens-per-rank", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)

    spec = reference_spec()
    base = spec.base_placement()
    t0 = time.perf_counter()
    layers = layered_imbalance(spec, args.layers, args.target_ir, args.tokens_per_rank, args.seed)
    rows = []
    for l, routing in enumerate(layers):
        p = plan(routing, base, spec, default_windows(routing, spec))
        base_a = init_locality_first(routing, base)
        rows.append({
            "layer": l,
            "ir_pre": imbalance_ratio(rank_loads(routing, base)),
            "ir_post": imbalance_ratio(rank_loads(p.assignment, p.placement)),
            "skew_pre": layer_compute_latency(rank_compute_latency(base_a, base, spec))[1],
            "skew_post": layer_compute_latency(rank_compute_latency(p.assignment, p.placement, spec))[1],
            "replicas": p.num_replicas,
            "iterations": p.iterations_used,
            "exposed_s": exposed_overhead([f[0] for f in p.feasibility], [f[1] for f in p.feasibility]),
        })
    dt = time.perf_counter() - t0
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("ir_pre", "ir_post", "skew_pre", "skew_post")}
    print(f"{len(rows)} layers planned in {dt:.2f}s")
    print(f"token IR      {mean['ir_pre']:.3f} -> {mean['ir_post']:.3f}")
    print(f"latency skew  {mean['skew_pre']:.3f} -> {mean['skew_post']:.3f}")
    print(f"replicas {sum(r['replicas'] for r in rows)}, max exposed {max(r['exposed_s'] for r in rows):.3g}s")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
