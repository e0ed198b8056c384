"""Analytical per-rank latency model for an expert-parallel MoE layer.

Compute: each expert's time is tokens * flops / (eta(tokens) * peak), with
eta evaluated on the per-rank token count so fragmented replicas pay the
small-batch penalty. Communication: dispatch and combine each cost
max(ingress, egress) / bandwidth on the worst rank.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Assignment, ClusterSpec, Placement, SourceRouting


@dataclass(frozen=True)
class RankLatency:
    rank: int
    compute: float
    ingress_volume: float
    egress_volume: float
    comm: float

    @property
    def total(self) -> float:
        return self.compute + self.comm


def expert_compute_time(tokens, spec: ClusterSpec):
    """Seconds to run an expert GEMM over ``tokens`` tokens (array-friendly)."""
    n = np.asarray(tokens, dtype=np.float64)
    eta = spec.efficiency_curve.eta(n)
    t = n * spec.per_token_flops / (eta * spec.peak_flops)
    t = np.where(n > 0, t, 0.0)
    return float(t) if t.ndim == 0 else t


def _check_valid(assignment: Assignment, placement: Placement) -> None:
    problems = assignment.violations(placement=placement)
    if problems:
        raise ValueError(problems[0])


def rank_compute_latency(assignment: Assignment, placement: Placement, spec: ClusterSpec,
                         validate: bool = True) -> np.ndarray:
    if validate:
        _check_valid(assignment, placement)
    return expert_compute_time(assignment.per_rank_expert, spec).sum(axis=1)


def layer_compute_latency(per_rank: Sequence[float]) -> tuple[float, float]:
    """Return (slowest rank, max/mean) for a list of per-rank latencies."""
    arr = np.asarray(per_rank, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty latency list")
    mx = float(arr.max())
    mean = float(arr.mean())
    return mx, (mx / mean if mean > 0 else 1.0)


def dedup_factors(spec: ClusterSpec, routing: Optional[SourceRouting] = None,
                  placement: Optional[Placement] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-rank (lambda_in, lambda_out), each floored at 1.

    For the ``fanin`` model with per-token metadata, lambda_in on rank r is
    remote expert-hits landing on r divided by distinct remote (token, r)
    deliveries; lambda_out is hits leaving r divided by distinct
    (token, destination rank) sends. Hosting follows the base placement.
    """
    ep = spec.ep
    dm = spec.dedup_model
    if dm.kind == "constant":
        return np.full(ep, dm.lambda_in), np.full(ep, dm.lambda_out)
    if routing is None or routing.token_experts is None:
        return np.ones(ep), np.ones(ep)
    if placement is None:
        placement = spec.base_placement()
    host = placement.base_host()
    hits_in = np.zeros(ep)
    uniq_in = np.zeros(ep)
    hits_out = np.zeros(ep)
    uniq_out = np.zeros(ep)
    for rs, toks in enumerate(routing.token_experts):
        if toks.size == 0:
            continue
        dest = host[toks]  # (n_tok, k) destination rank per hit
        for rt in range(ep):
            if rt == rs:
                continue
            m = (dest == rt)
            h = int(m.sum())
            u = int(m.any(axis=1).sum())
            hits_in[rt] += h
            uniq_in[rt] += u
            hits_out[rs] += h
            uniq_out[rs] += u
    lam_in = np.where(uniq_in > 0, hits_in / np.maximum(uniq_in, 1), 1.0)
    lam_out = np.where(uniq_out > 0, hits_out / np.maximum(uniq_out, 1), 1.0)
    return np.maximum(lam_in, 1.0), np.maximum(lam_out, 1.0)


def traffic_volumes(assignment: Assignment, placement: Placement, spec: ClusterSpec,
                    lambdas: Optional[tuple] = None, validate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-rank (ingress, egress) bytes for one dispatch."""
    if validate:
        _check_valid(assignment, placement)
    lam_in, lam_out = lambdas if lambdas is not None else dedup_factors(spec)
    s = assignment.split
    diag = np.einsum("rer->r", s)
    received = s.sum(axis=(0, 1)) - diag
    sent = s.sum(axis=(1, 2)) - diag
    return spec.hidden_bytes / lam_in * received, spec.hidden_bytes / lam_out * sent


def rank_breakdown(assignment: Assignment, placement: Placement, spec: ClusterSpec,
                   lambdas: Optional[tuple] = None, validate: bool = True) -> list[RankLatency]:
    comp = rank_compute_latency(assignment, placement, spec, validate=validate)
    v_in, v_out = traffic_volumes(assignment, placement, spec, lambdas, validate=False)
    comm = 2.0 * np.maximum(v_in, v_out) / spec.net_bandwidth
    return [RankLatency(r, float(comp[r]), float(v_in[r]), float(v_out[r]), float(comm[r]))
            for r in range(spec.ep)]


def rank_latencies(assignment: Assignment, placement: Placement, spec: ClusterSpec,
                   lambdas: Optional[tuple] = None, validate: bool = True) -> np.ndarray:
    """Per-rank compute + round-trip communication (the planner's objective terms)."""
    comp = rank_compute_latency(assignment, placement, spec, validate=validate)
    v_in, v_out = traffic_volumes(assignment, placement, spec, lambdas, validate=False)
    return comp + 2.0 * np.maximum(v_in, v_out) / spec.net_bandwidth


def moe_step_latency(assignment: Assignment, placement: Placement, spec: ClusterSpec,
                     lambdas: Optional[tuple] = None) -> tuple[float, list[RankLatency]]:
    """Slowest compute plus twice the worst per-rank network time."""
    breakdown = rank_breakdown(assignment, placement, spec, lambdas)
    t_comp = max(b.compute for b in breakdown)
    v = max(max(b.ingress_volume, b.egress_volume) for b in breakdown)
    return t_comp + 2.0 * (v / spec.net_bandwidth), breakdown


def transfer_latency(delta_in, delta_out, spec: ClusterSpec) -> float:
    return max(len(delta_in), len(delta_out)) * spec.expert_weight_bytes / spec.net_bandwidth


def exposed_overhead(transfer: Sequence[float], window: Sequence[float]) -> float:
    t = np.asarray(transfer, dtype=np.float64)
    w = np.asarray(window, dtype=np.float64)
    if t.shape != w.shape:
        raise ValueError("transfer and window lists differ in length")
    if t.size == 0:
        return 0.0
    return float(max(0.0, (t - w).max()))


def breakdown_csv(breakdown: Sequence[RankLatency]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "compute_s", "v_in_bytes", "v_out_bytes", "comm_s", "total_s"])
    for b in breakdown:
        w.writerow([b.rank, repr(b.compute), repr(b.ingress_volume), repr(b.egress_volume),
                    repr(b.comm), repr(b.total)])
    return buf.getvalue()
