"""Discrete-event model of one decoding/prefill step across all MoE layers.

Main track per layer: attention -> dispatch -> moe_compute -> combine.
Collectives are barriers, so dispatch/combine span every rank and last as
long as the worst rank's max(ingress, egress) / bandwidth.

Auxiliary track (probe mode), while layer L runs:
  predict(L+1) starts with L's dispatch; plan(L+1) follows it;
  prefetch part 1 runs from max(dispatch end, plan end) until L's combine
  starts, then yields the network; part 2 resumes after combine and must
  finish inside L+1's attention; update(L+1) prepares masks during that
  attention. Anything that does not fit is charged as exposed overhead.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import perf_model, planner
from .core import Assignment, ClusterSpec, Placement, Plan, SourceRouting
from .metrics import imbalance_ratio, rank_loads

PHASES = ("attention", "dispatch", "moe_compute", "combine", "predict", "plan",
          "prefetch_part1", "prefetch_part2", "update")


@dataclass(frozen=True)
class PhaseEvent:
    rank: int
    layer: int
    phase: str
    start: float
    end: float
    resource: str


@dataclass
class LayerResult:
    layer: int
    baseline_latency: float
    probe_latency: float
    exposed: float
    ir_pre: float
    ir_post: float
    skew_pre: float
    skew_post: float
    replicas: int = 0
    iterations: int = 0
    planned: bool = False
    plan_certified: bool = True
    used_plan: bool = False
    transfers: tuple = ()
    windows: tuple = ()


@dataclass
class StepResult:
    baseline_latency: float
    probe_latency: float
    layers: list
    events: list = field(default_factory=list)

    @property
    def exposed(self) -> list:
        return [lr.exposed for lr in self.layers]

    def _mean(self, attr) -> float:
        rows = self.layers[1:] if len(self.layers) > 1 else self.layers
        return float(np.mean([getattr(lr, attr) for lr in rows]))

    @property
    def ir_pre(self) -> float:
        return self._mean("ir_pre")

    @property
    def ir_post(self) -> float:
        return self._mean("ir_post")

    @property
    def skew_pre(self) -> float:
        return self._mean("skew_pre")

    @property
    def skew_post(self) -> float:
        return self._mean("skew_post")

    @property
    def replicas_used(self) -> int:
        return sum(lr.replicas for lr in self.layers)

    @property
    def iterations(self) -> int:
        return sum(lr.iterations for lr in self.layers)


def predict_duration(spec: ClusterSpec, tokens_per_rank: float) -> float:
    """Residual-MLP inference time (through the GEMM model) plus the all-gather."""
    t = tokens_per_rank * spec.predictor_flops_per_token / spec.peak_flops if spec.predictor_flops_per_token else 0.0
    return t + spec.predict_allgather_cost


def hiding_windows(spec: ClusterSpec, dispatch: float, compute_max: float, tokens_per_rank: float) -> np.ndarray:
    """Per-rank window sized for the worst-case planner run.

    Assumes prefetch starts after dispatch and after a full k_max-iteration
    plan; the window is the remaining MoE-compute time plus the next layer's
    attention.
    """
    plan_end = predict_duration(spec, tokens_per_rank) + spec.solver_max_iters * spec.planner_iter_cost
    start = max(dispatch, plan_end)
    remaining = max(0.0, dispatch + compute_max - start)
    return np.full(spec.ep, remaining + spec.attention_duration)


def default_windows(routing: SourceRouting, spec: ClusterSpec, placement: Optional[Placement] = None) -> np.ndarray:
    """Windows derived from the layer's own locality-first execution."""
    base = placement if placement is not None else spec.base_placement()
    a = planner.init_locality_first(routing, base)
    lams = perf_model.dedup_factors(spec, routing, base)
    bd = perf_model.rank_breakdown(a, base, spec, lams, validate=False)
    d = max(max(b.ingress_volume, b.egress_volume) for b in bd) / spec.net_bandwidth
    c = max(b.compute for b in bd)
    return hiding_windows(spec, d, c, routing.total_hits / spec.top_k / spec.ep)


def materialize(plan: Plan, truth: SourceRouting) -> Assignment:
    """Map a plan made on predicted routing onto the ground-truth counts.

    Each (source, expert) row is split over targets in the plan's proportions
    (largest remainder, ties to lower rank). Rows the plan never saw go to the
    source rank if it hosts the expert, else to the base host.
    """
    planned = np.asarray(plan.assignment.split, dtype=np.int64)
    ep, E, _ = planned.shape
    counts = np.asarray(truth.counts, dtype=np.int64)
    row_sum = planned.sum(axis=2)
    hosted = plan.placement.hosted()
    host = plan.placement.base_host()

    out = np.zeros_like(planned)
    seen = row_sum > 0
    frac = np.where(seen[:, :, None], planned / np.maximum(row_sum, 1)[:, :, None], 0.0)
    raw = counts[:, :, None] * frac
    flo = np.floor(raw).astype(np.int64)
    deficit = np.where(seen, counts - flo.sum(axis=2), 0)
    order = np.argsort(-(raw - flo), axis=2, kind="stable")
    pos = np.argsort(order, axis=2, kind="stable")
    flo += (pos < deficit[:, :, None]).astype(np.int64) * (frac > 0)
    out[seen] = flo[seen]

    rs_idx, e_idx = np.nonzero(~seen & (counts > 0))
    for rs, e in zip(rs_idx.tolist(), e_idx.tolist()):
        tgt = rs if hosted[rs, e] else int(host[e])
        out[rs, e, tgt] = counts[rs, e]
    return Assignment(out)


def _layer_numbers(a: Assignment, placement: Placement, spec: ClusterSpec, lams) -> tuple[float, float, np.ndarray]:
    comp = perf_model.rank_compute_latency(a, placement, spec, validate=False)
    v_in, v_out = perf_model.traffic_volumes(a, placement, spec, lams, validate=False)
    d = float(np.maximum(v_in, v_out).max() / spec.net_bandwidth)
    return d, float(comp.max()), comp


def _skew(comp: np.ndarray) -> float:
    return perf_model.layer_compute_latency(comp)[1]


def simulate_step(truth: Sequence[SourceRouting], predicted: Optional[Sequence[SourceRouting]],
                  spec: ClusterSpec, mode: str = "probe", planning: bool = True,
                  plans: Optional[dict] = None, record_events: bool = True) -> StepResult:
    """Simulate one step over all layers.

    ``predicted[l]`` is the lookahead estimate of layer l (entry 0 is unused:
    the first layer has no producer). ``plans`` may inject precomputed plans
    by layer index, bypassing the planner for those layers.
    """
    if mode not in ("baseline", "probe"):
        raise ValueError(f"unknown mode {mode!r}")
    n_layers = len(truth)
    if predicted is None:
        predicted = truth
    if len(predicted) != n_layers:
        raise ValueError(f"prediction/layer misalignment: {len(predicted)} predictions for {n_layers} layers")
    probe = mode == "probe" and planning
    base = spec.base_placement()
    ep = spec.ep
    t_attn = spec.attention_duration
    events: list = []

    def ev(rank, layer, phase, start, end, resource):
        if record_events and end > start:
            events.append(PhaseEvent(rank, layer, phase, start, end, resource))

    def ev_all(layer, phase, start, end, resource):
        for r in range(ep):
            ev(r, layer, phase, start, end, resource)

    layers = []
    t = 0.0
    baseline_total = 0.0
    probe_total = 0.0
    pending = None  # (plan, part2 per rank, transfers, windows) for the current layer
    for l in range(n_layers):
        routing = truth[l]
        lams = perf_model.dedup_factors(spec, routing, base)
        base_a = planner.init_locality_first(routing, base)
        d_b, c_b, comp_b = _layer_numbers(base_a, base, spec, lams)
        baseline_layer = t_attn + 2 * d_b + c_b
        baseline_total += baseline_layer
        ir_pre = imbalance_ratio(rank_loads(routing, base))
        skew_pre = _skew(comp_b)

        # attention (+ tail of the prefetch that carried this layer's replicas)
        attn_start = t
        ev_all(l, "attention", attn_start, attn_start + t_attn, "compute")
        stall = 0.0
        placement, assign = base, base_a
        d, c, comp = d_b, c_b, comp_b
        lr = LayerResult(layer=l, baseline_latency=baseline_layer, probe_latency=baseline_layer, exposed=0.0,
                         ir_pre=ir_pre, ir_post=ir_pre, skew_pre=skew_pre, skew_post=skew_pre)
        if pending is not None:
            p, part2, transfers, windows = pending
            for r in range(ep):
                ev(r, l, "prefetch_part2", attn_start, attn_start + part2[r], "network")
            stall = max(0.0, float(np.max(part2)) - t_attn)
            ev(0, l, "update", attn_start, attn_start + spec.update_cost, "control")
            stall = max(stall, spec.update_cost - t_attn)
            cand = materialize(p, routing)
            d_p, c_p, comp_p = _layer_numbers(cand, p.placement, spec, lams)
            # masks fall back to base routing when the plan would not help the real tokens
            if c_p + 2 * d_p < c_b + 2 * d_b:
                placement, assign, d, c, comp = p.placement, cand, d_p, c_p, comp_p
                lr.used_plan = True
            lr.planned = True
            lr.replicas = p.num_replicas
            lr.iterations = p.evaluations
            lr.plan_certified = p.certified
            lr.transfers = tuple(transfers)
            lr.windows = tuple(windows)
            pending = None

        dispatch_start = attn_start + t_attn + stall
        dispatch_end = dispatch_start + d
        ev_all(l, "dispatch", dispatch_start, dispatch_end, "network")
        for r in range(ep):
            ev(r, l, "moe_compute", dispatch_end, dispatch_end + comp[r], "compute")
        combine_start = dispatch_end + c

        spill = 0.0
        if probe and l + 1 < n_layers:
            nxt = predicted[l + 1]
            tokens_per_rank = nxt.total_hits / spec.top_k / ep
            pred_end = dispatch_start + predict_duration(spec, tokens_per_rank)
            ev(0, l, "predict", dispatch_start, pred_end, "control")
            windows = hiding_windows(spec, d, c, tokens_per_rank)
            if plans is not None and (l + 1) in plans:
                p = plans[l + 1]
            else:
                p = planner.plan(nxt, base, spec, windows, validate=False)
            plan_end = pred_end + p.evaluations * spec.planner_iter_cost
            ev(0, l, "plan", pred_end, plan_end, "control")
            spill = max(0.0, plan_end - combine_start)
            prefetch_start = max(dispatch_end, plan_end)
            transfers = np.array([perf_model.transfer_latency(p.delta_in[r], p.delta_out[r], spec)
                                  for r in range(ep)])
            gap = max(0.0, combine_start + spill - prefetch_start)
            part1 = np.minimum(transfers, gap)
            part2 = transfers - part1
            for r in range(ep):
                ev(r, l, "prefetch_part1", prefetch_start, prefetch_start + part1[r], "network")
            actual_windows = np.full(ep, gap + t_attn)
            pending = (p, part2, transfers, actual_windows)

        combine_start += spill
        combine_end = combine_start + d
        ev_all(l, "combine", combine_start, combine_end, "network")
        t = combine_end

        # summed from parts (not end - start) so a no-op layer equals baseline bit for bit
        layer_latency = t_attn + 2 * d + c + (stall + spill)
        probe_total += layer_latency
        lr.exposed = stall + spill
        lr.probe_latency = layer_latency if mode == "probe" else baseline_layer
        if mode == "probe":
            lr.ir_post = imbalance_ratio(rank_loads(assign, placement))
            lr.skew_post = _skew(comp)
        layers.append(lr)

    if mode != "probe" or not planning:
        probe_total = baseline_total
    return StepResult(baseline_latency=baseline_total, probe_latency=probe_total, layers=layers, events=events)


def replica_slot_manager(plans: Sequence[Optional[Plan]], spec: ClusterSpec) -> list[dict]:
    """Assign replica slots with two alternating banks.

    Layer l writes into bank (l mod 2), slots [bank*budget, bank*budget+budget),
    so the next layer's prefetch never touches slots the current layer reads.
    Returns, per layer, {rank: {expert: slot}}.
    """
    budget = spec.replica_budget_per_rank
    if 2 * budget > spec.replica_slots_per_rank:
        raise ValueError("replica slots cannot hold two banks of the budget")
    schedule = []
    for l, p in enumerate(plans):
        layer_slots: dict = {}
        if p is not None:
            for r, experts in enumerate(p.delta_in):
                if len(experts) > budget:
                    raise ValueError(f"rank {r} needs {len(experts)} replicas at layer {l}, budget {budget}")
                if experts:
                    offset = (l % 2) * budget
                    layer_slots[r] = {int(e): offset + i for i, e in enumerate(experts)}
        schedule.append(layer_slots)
    return schedule


def events_csv(events: Sequence[PhaseEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "layer", "phase", "start", "end", "resource"])
    for e in events:
        w.writerow([e.rank, e.layer, e.phase, repr(e.start), repr(e.end), e.resource])
    return buf.getvalue()


# -- multi-step experiments -----------------------------------------------------

MODES = ("baseline", "probe", "one_shot_history")


@dataclass
class ExperimentResult:
    """Per-step latency and throughput series, one list per compared mode."""
    tokens_per_step: int
    latency: dict
    ir_post: dict
    exposed: list
    shift_steps: tuple = ()
    warmup: int = 0

    def throughput(self, mode: str) -> np.ndarray:
        return self.tokens_per_step / np.asarray(self.latency[mode])

    def mean_throughput(self, mode: str, start: int = 0, stop: Optional[int] = None) -> float:
        return float(np.mean(self.throughput(mode)[start:stop]))

    def to_csv(self) -> str:
        modes = [m for m in MODES if m in self.latency]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["step"]
        for m in modes:
            head += [f"{m}_latency_s", f"{m}_throughput", f"{m}_ir"]
        if "probe" in self.latency:
            head.append("probe_exposed_s")
        w.writerow(head)
        for s in range(len(self.latency[modes[0]])):
            row = [s]
            for m in modes:
                lat = self.latency[m][s]
                row += [repr(lat), repr(self.tokens_per_step / lat), repr(self.ir_post[m][s])]
            if "probe" in self.latency:
                row.append(repr(self.exposed[s]))
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return asdict(self)


def _predict_layers(truth, predictor, step):
    if predictor == "perfect":
        return truth
    from .predictor import noisy_oracle_predict
    return [noisy_oracle_predict(r, predictor, layer=l, step=step) for l, r in enumerate(truth)]


def _history_routing(acc: np.ndarray, n_steps: int, spec: ClusterSpec) -> SourceRouting:
    counts = np.rint(acc / max(n_steps, 1)).astype(np.int64)
    return SourceRouting(counts)


def static_plan_latency(truth: Sequence[SourceRouting], plans: Sequence[Plan], spec: ClusterSpec) -> tuple[float, float]:
    """Step latency and mean token-IR with one fixed placement per layer, no guard."""
    total = 0.0
    irs = []
    for routing, p in zip(truth, plans):
        lams = perf_model.dedup_factors(spec, routing, spec.base_placement())
        a = materialize(p, routing)
        d, c, _ = _layer_numbers(a, p.placement, spec, lams)
        total += spec.attention_duration + 2 * d + c
        irs.append(imbalance_ratio(rank_loads(a, p.placement)))
    return total, float(np.mean(irs))


def run_experiment(script, spec: ClusterSpec, predictor="perfect", modes: Sequence[str] = MODES,
                   warmup: int = 100, steps: Optional[int] = None) -> ExperimentResult:
    """Replay a workload script under the requested modes.

    ``predictor`` is "perfect" or a NoisyOracleConfig. one_shot_history runs
    sharded until ``warmup``, then plans once per layer from the averaged
    warm-up counts (same replica budget and default windows as probe) and keeps that
    placement; its one-time weight migration is charged at the switch step.
    """
    from .workload import TraceGenerator

    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    n_steps = script.steps if steps is None else steps
    if n_steps > script.steps:
        raise ValueError(f"requested {n_steps} steps but the script has {script.steps}")
    gen = TraceGenerator(script, spec)
    latency = {m: [] for m in modes}
    ir_post = {m: [] for m in modes}
    exposed = []
    base = spec.base_placement()
    acc = None
    static_plans = None
    for step in range(n_steps):
        truth = gen.step_routings(step)
        need_base = "baseline" in modes or "one_shot_history" in modes
        base_res = simulate_step(truth, None, spec, "baseline", record_events=False) if need_base else None
        if "baseline" in modes:
            latency["baseline"].append(base_res.baseline_latency)
            ir_post["baseline"].append(float(np.mean([lr.ir_pre for lr in base_res.layers])))
        if "probe" in modes:
            res = simulate_step(truth, _predict_layers(truth, predictor, step), spec, "probe", record_events=False)
            latency["probe"].append(res.probe_latency)
            ir_post["probe"].append(float(np.mean([lr.ir_post for lr in res.layers])))
            exposed.append(float(sum(res.exposed)))
        if "one_shot_history" in modes:
            if step < warmup:
                stacked = np.stack([r.counts for r in truth]).astype(np.float64)
                acc = stacked if acc is None else acc + stacked
                latency["one_shot_history"].append(base_res.baseline_latency)
                ir_post["one_shot_history"].append(float(np.mean([lr.ir_pre for lr in base_res.layers])))
                continue
            charge = 0.0
            if static_plans is None:
                hist = truth if acc is None else [_history_routing(acc[l], warmup, spec) for l in range(len(truth))]
                static_plans = [planner.plan(r, base, spec, default_windows(r, spec), validate=False) for r in hist]
                charge = sum(max(perf_model.transfer_latency(p.delta_in[r], p.delta_out[r], spec)
                                 for r in range(spec.ep)) for p in static_plans)
            lat, ir = static_plan_latency(truth, static_plans, spec)
            latency["one_shot_history"].append(lat + charge)
            ir_post["one_shot_history"].append(ir)
    return ExperimentResult(tokens_per_step=script.tokens_per_step, latency=latency, ir_post=ir_post,
                            exposed=exposed, shift_steps=tuple(s for s, _ in script.shift_events),
                            warmup=warmup)


def batch_sweep(script, spec: ClusterSpec, batch_sizes: Sequence[int], predictor="perfect",
                steps: Optional[int] = None) -> list[dict]:
    """Mean throughput of baseline and probe at each batch size."""
    from dataclasses import replace

    rows = []
    for b in batch_sizes:
        sc = replace(script, tokens_per_step=int(b))
        res = run_experiment(sc, spec, predictor, modes=("baseline", "probe"), steps=steps)
        rows.append({"batch": int(b),
                     "baseline_throughput": res.mean_throughput("baseline"),
                     "probe_throughput": res.mean_throughput("probe"),
                     "speedup": res.mean_throughput("probe") / res.mean_throughput("baseline")})
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch", "baseline_throughput", "probe_throughput", "speedup"])
    for r in rows:
        w.writerow([r["batch"], repr(r["baseline_throughput"]), repr(r["probe_throughput"]), repr(r["speedup"])])
    return buf.getvalue()


def step_result_json(res: StepResult) -> str:
    d = {"baseline_latency": res.baseline_latency, "probe_latency": res.probe_latency,
         "ir_pre": res.ir_pre, "ir_post": res.ir_post, "skew_pre": res.skew_pre, "skew_post": res.skew_post,
         "replicas_used": res.replicas_used, "iterations": res.iterations,
         "layers": [asdict(lr) for lr in res.layers]}
    return json.dumps(d, indent=2, sort_keys=True, default=float) + "\n"
