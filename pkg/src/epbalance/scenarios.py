"""Reference cluster specs and scenario files.

A scenario file is JSON with a "cluster" object (ClusterSpec fields) plus
either "routing" (one layer) or "layers" (a list), optionally "placement",
"windows" and "workload" (WorkloadScript fields).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import ClusterSpec, EfficiencyCurve, Placement, SourceRouting, validate_scenario
from .workload import WorkloadScript, calibrated_routing


def reference_spec(**overrides) -> ClusterSpec:
    """An 8-rank, 128-expert, top-4 node with bf16 activations of width 2880."""
    kw = dict(ep=8, num_experts=128, top_k=4, hidden_bytes=5760.0, expert_weight_bytes=4.98e7,
              per_token_flops=4.98e7, peak_flops=6e14, net_bandwidth=4.5e11,
              efficiency_curve=EfficiencyCurve(n_sat=128.0), attention_duration=3e-4)
    kw.update(overrides)
    return ClusterSpec(**kw)


def layered_imbalance(spec: ClusterSpec, num_layers: int = 35, target_ir: float = 2.13,
                      tokens_per_rank: int = 512, seed: int = 0) -> list[SourceRouting]:
    return [calibrated_routing(spec, tokens_per_rank, target_ir, seed=seed * 1000 + l) for l in range(num_layers)]


@dataclass
class Scenario:
    spec: ClusterSpec
    layers: list
    placement: Optional[Placement] = None
    windows: Optional[list] = None
    workload: Optional[WorkloadScript] = None

    @property
    def base(self) -> Placement:
        return self.placement if self.placement is not None else self.spec.base_placement()

    def violations(self) -> list[str]:
        out = list(self.spec.violations())
        if out:
            return out
        for i, r in enumerate(self.layers):
            out.extend(f"layer {i}: {p}" for p in validate_scenario(self.spec, r, self.base))
        if self.windows is not None and len(self.windows) != self.spec.ep:
            out.append(f"windows: expected {self.spec.ep} entries, got {len(self.windows)}")
        if self.workload is not None:
            out.extend(self.workload.violations(self.spec))
        return out

    def to_dict(self) -> dict:
        d = {"cluster": self.spec.to_dict(), "layers": [r.to_dict() for r in self.layers]}
        if self.placement is not None:
            d["placement"] = self.placement.to_dict()
        if self.windows is not None:
            d["windows"] = [float(w) for w in self.windows]
        if self.workload is not None:
            d["workload"] = self.workload.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        unknown = set(d) - {"cluster", "routing", "layers", "placement", "windows", "workload"}
        if unknown:
            raise ValueError(f"scenario: unknown keys {sorted(unknown)}")
        if "cluster" not in d:
            raise ValueError("scenario: missing 'cluster'")
        spec = ClusterSpec.from_dict(d["cluster"])
        if "routing" in d and "layers" in d:
            raise ValueError("scenario: give either 'routing' or 'layers', not both")
        raw = [d["routing"]] if "routing" in d else d.get("layers", [])
        layers = [SourceRouting.from_dict(r) for r in raw]
        placement = Placement.from_dict(d["placement"]) if "placement" in d else None
        workload = WorkloadScript.from_dict(d["workload"]) if "workload" in d else None
        return cls(spec, layers, placement, d.get("windows"), workload)


def load_scenario(path) -> Scenario:
    """Parse a scenario file; json.JSONDecodeError propagates with its location."""
    with open(path, encoding="utf-8") as fh:
        return Scenario.from_dict(json.load(fh))


def dump_scenario(sc: Scenario) -> str:
    return json.dumps(sc.to_dict(), indent=1, sort_keys=True) + "\n"


def robustness_script(**overrides) -> WorkloadScript:
    """Stationary decode traffic with one topic switch at step 200 of 500."""
    kw = dict(regime="decode_churn", steps=500, tokens_per_step=4096, skew=1.2, churn_rate=0.02,
              shift_events=((200, 12345),), seed=3, num_layers=6, num_topics=1, slots=64,
              ir_band=None)
    kw.update(overrides)
    return WorkloadScript(**kw)


def with_windows(sc: Scenario, windows) -> Scenario:
    return replace(sc, windows=list(np.asarray(windows, dtype=float)))


def random_instance(rng: np.random.Generator, ep: int, num_experts: int, top_k: int = 2,
                    tokens_per_rank: int = 64, concentration: float = 0.3, granularity: int = 1,
                    window_units: float = 4.0, **spec_overrides) -> tuple[ClusterSpec, SourceRouting, np.ndarray]:
    """A skewed random (spec, routing, windows) triple.

    Per-rank expert popularity is Dirichlet(concentration); counts are drawn
    in ``granularity``-token chunks. Windows are uniform in
    [0, window_units] expert-transfer times, so the budget check binds.
    """
    kw = dict(ep=ep, num_experts=num_experts, top_k=top_k, hidden_bytes=4096.0, expert_weight_bytes=1e8,
              per_token_flops=1e8, peak_flops=1e15, net_bandwidth=9e11,
              efficiency_curve=EfficiencyCurve(n_sat=float(rng.integers(1, 65))))
    kw.update(spec_overrides)
    spec = ClusterSpec(**kw)
    hits = tokens_per_rank * top_k
    chunks = max(hits // granularity, 1)
    pop = rng.dirichlet(np.full(num_experts, concentration))
    counts = np.stack([rng.multinomial(chunks, pop) * granularity for _ in range(ep)]).astype(np.int64)
    unit = spec.expert_weight_bytes / spec.net_bandwidth
    windows = rng.uniform(0.0, window_units, size=ep) * unit
    return spec, SourceRouting(counts), windows
