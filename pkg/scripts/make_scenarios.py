"""Regenerate the scenario files under scenarios/ (deterministic)."""

import argparse
import json
from pathlib import Path

from epbalance.core import ClusterSpec, EfficiencyCurve, SourceRouting
from epbalance.scenarios import Scenario, dump_scenario, layered_imbalance, reference_spec, robustness_script
from epbalance.workload import WorkloadScript


def hot_expert() -> Scenario:
    spec = ClusterSpec(ep=2, num_experts=2, top_k=1, hidden_bytes=4096.0, expert_weight_bytes=1e8,
                       per_token_flops=1e8, peak_flops=1e15, net_bandwidth=9e11,
                       efficiency_curve=EfficiencyCurve(n_sat=1.0))
    return Scenario(spec, [SourceRouting([[150, 50], [150, 50]], declared_batch=400)], windows=[1e-3, 1e-3])


def uniform() -> Scenario:
    spec = reference_spec()
    return Scenario(spec, [SourceRouting([[4] * 128] * 8, declared_batch=1024)])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dir", default="scenarios")
    args = ap.parse_args()
    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "hot_expert.json": hot_expert(),
        "uniform.json": uniform(),
        "layered_imbalance.json": Scenario(reference_spec(), layered_imbalance(reference_spec())),
        "robustness.json": Scenario(reference_spec(), [], workload=robustness_script()),
        "prefill_burst.json": Scenario(reference_spec(attention_duration=1.5e-3), [], workload=WorkloadScript(
            regime="prefill_burst", steps=20, tokens_per_step=16384, num_layers=6, seed=1)),
        "repeat_skew.json": Scenario(reference_spec(), [], workload=WorkloadScript(
            regime="repeat_skew", steps=20, tokens_per_step=4096, num_layers=6, seed=1)),
    }
    for name, sc in files.items():
        (out / name).write_text(dump_scenario(sc))
        print(f"wrote {out / name}")
    (out / "predictor.json").write_text(json.dumps({"epochs": 8, "lr": 2.0, "seed": 0}, indent=1) + "\n")
    print(f"wrote {out / 'predictor.json'}")


if __name__ == "__main__":
    main()
