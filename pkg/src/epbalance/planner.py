"""Greedy balance-optimal replication planner and a brute-force reference.

The greedy loop repeatedly pairs the bottleneck rank with the least-loaded
rank, replicates the bottleneck's heaviest movable expert onto the helper
(subject to replica budget and both hiding windows), and water-fills
remote-origin tokens of that expert onto the new replica.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import perf_model
from .core import Assignment, ClusterSpec, Placement, Plan, SourceRouting, check_scenario


@dataclass
class SolverState:
    """Mutable working state of one greedy solve.

    ``latencies`` caches compute + round-trip comm per rank for ``split``;
    ``check()`` recomputes it from scratch.
    """

    spec: ClusterSpec
    base: Placement
    split: np.ndarray
    lam_in: np.ndarray
    lam_out: np.ndarray
    windows: np.ndarray
    delta_in: list = field(default_factory=list)
    delta_out: list = field(default_factory=list)
    k: int = 0
    rejected: int = 0
    max_replicas: Optional[int] = None
    invalid: set = field(default_factory=set)
    history: list = field(default_factory=list)

    def __post_init__(self):
        ep = self.spec.ep
        if not self.delta_in:
            self.delta_in = [[] for _ in range(ep)]
        if not self.delta_out:
            self.delta_out = [[] for _ in range(ep)]
        self._hosted = self.base.hosted()
        self._base_host = self.base.base_host()
        self.refresh()

    @property
    def cin(self) -> np.ndarray:
        return self.spec.hidden_bytes / self.lam_in

    @property
    def cout(self) -> np.ndarray:
        return self.spec.hidden_bytes / self.lam_out

    def placement(self) -> Placement:
        return self.base.with_replicas(self.delta_in)

    def hosts(self, rank: int, expert: int) -> bool:
        return bool(self._hosted[rank, expert])

    def sender(self, expert: int) -> int:
        # only the base host holds the weights before the prefetch starts
        return int(self._base_host[expert])

    def add_replica(self, src: int, dst: int, expert: int) -> None:
        if self._hosted[dst, expert]:
            return  # already a copy there: tokens move, no weights do
        self.delta_in[dst].append(expert)
        self.delta_out[self.sender(expert)].append(expert)
        self._hosted[dst, expert] = True

    def refresh(self) -> None:
        a = Assignment(self.split)
        self.n_re = np.array(a.per_rank_expert, dtype=np.int64)
        self.compute = perf_model.rank_compute_latency(a, self.base, self.spec, validate=False)
        self.v_in, self.v_out = perf_model.traffic_volumes(
            a, self.base, self.spec, (self.lam_in, self.lam_out), validate=False)
        self.latencies = self.compute + 2.0 * np.maximum(self.v_in, self.v_out) / self.spec.net_bandwidth

    def check(self) -> None:
        a = Assignment(self.split)
        fresh = perf_model.rank_latencies(a, self.placement(), self.spec, (self.lam_in, self.lam_out))
        if not np.allclose(fresh, self.latencies, rtol=1e-12, atol=0.0):
            raise AssertionError("cached latencies diverged from recomputation")


def init_locality_first(routing: SourceRouting, base_placement: Placement) -> Assignment:
    """Send every token to the unique base host of its expert."""
    ep, E = routing.counts.shape
    host = base_placement.base_host()
    split = np.zeros((ep, E, ep), dtype=np.int64)
    split[:, np.arange(E), host] = routing.counts
    return Assignment(split)


def movable_mass(state: SolverState, rank: int) -> np.ndarray:
    """Per-expert remote-origin tokens currently served on ``rank``."""
    col = state.split[:, :, rank]
    return col.sum(axis=0) - col[rank]


def select_heavy_expert(rank: int, state: SolverState, dst: Optional[int] = None,
                        exclude: Sequence[int] = ()) -> Optional[int]:
    """Expert on ``rank`` with the largest movable mass; ties go to the lower id.

    Excluded ids and triples marked invalid are skipped. An expert already
    hosted on ``dst`` stays eligible: moving its tokens there costs no
    weights. Returns None when nothing is movable.
    """
    mass = movable_mass(state, rank)
    best, best_mass = None, 0
    for e in range(mass.shape[0]):
        m = int(mass[e])
        if m <= 0 or e in exclude:
            continue
        if dst is not None and (rank, dst, e) in state.invalid:
            continue
        if m > best_mass:
            best, best_mass = e, m
    return best


def check_dual_budget(r_src: int, r_dst: int, expert: int, state: SolverState, spec: ClusterSpec) -> bool:
    """Replica budget on the receiver and hiding windows on both ends of the P2P copy.

    The copy is read from the expert's base host, which is r_src unless the
    bottleneck copy is itself a replica added earlier in this plan.
    """
    r_src = state.sender(expert)
    if len(state.delta_in[r_dst]) + 1 > spec.replica_budget_per_rank:
        return False
    t_dst = perf_model.transfer_latency(state.delta_in[r_dst] + [expert], state.delta_out[r_dst], spec)
    if t_dst > state.windows[r_dst]:
        return False
    t_src = perf_model.transfer_latency(state.delta_in[r_src], state.delta_out[r_src] + [expert], spec)
    return t_src <= state.windows[r_src]


def _source_order(state: SolverState, expert: int, r_src: int, r_dst: int) -> list[int]:
    """Sources whose tokens may leave r_src's copy, in move preference order."""
    spec = state.spec
    col = state.split[:, expert, r_src]
    egress_to_dst = state.split[:, :, r_dst].sum(axis=1)
    cands = [s for s in range(spec.ep) if s != r_src and col[s] > 0]
    return sorted(cands, key=lambda s: (s != r_dst, -int(egress_to_dst[s]), s))


def _pair_curves(state: SolverState, expert: int, r_src: int, r_dst: int, pool: int, local_avail: int):
    """Latency of r_src, r_dst and the cluster mean for every move size 0..pool."""
    spec = state.spec
    bw = spec.net_bandwidth
    x = np.arange(pool + 1, dtype=np.int64)
    x_local = np.minimum(x, local_avail)
    n_src = state.n_re[r_src, expert]
    n_dst = state.n_re[r_dst, expert]
    t = perf_model.expert_compute_time
    comp_src = state.compute[r_src] - t(n_src, spec) + t(n_src - x, spec)
    comp_dst = state.compute[r_dst] - t(n_dst, spec) + t(n_dst + x, spec)
    vin_src = state.v_in[r_src] - x * state.cin[r_src]
    vout_src = np.full(x.shape, state.v_out[r_src])
    vin_dst = state.v_in[r_dst] + (x - x_local) * state.cin[r_dst]
    vout_dst = state.v_out[r_dst] - x_local * state.cout[r_dst]
    l_src = comp_src + 2.0 * np.maximum(vin_src, vout_src) / bw
    l_dst = comp_dst + 2.0 * np.maximum(vin_dst, vout_dst) / bw
    others = state.latencies.sum() - state.latencies[r_src] - state.latencies[r_dst]
    mean = (others + l_src + l_dst) / spec.ep
    return l_src, l_dst, mean


def water_filling_rebalance(expert: int, r_src: int, r_dst: int, state: SolverState,
                            spec: ClusterSpec) -> tuple[np.ndarray, float]:
    """Move remote-origin tokens of ``expert`` from r_src's copy to r_dst.

    Tokens that originated on r_src never move. The move size is the one
    minimizing the pair's worse latency among sizes up to the first point
    where r_src reaches the cluster mean (or r_dst overtakes it); the whole
    pool moves if that point is never reached. Returns the new split and the
    reduction of the bottleneck latency (0 if r_src is not a bottleneck).
    """
    order = _source_order(state, expert, r_src, r_dst)
    col = state.split[:, expert, r_src]
    pool = int(sum(col[s] for s in order))
    if pool == 0:
        return state.split.copy(), 0.0
    local_avail = int(col[r_dst])
    l_src, l_dst, mean = _pair_curves(state, expert, r_src, r_dst, pool, local_avail)
    stop = np.flatnonzero((l_src <= mean) | (l_src <= l_dst))
    x_stop = int(stop[0]) if stop.size else pool
    worst = np.maximum(l_src, l_dst)[: x_stop + 1]
    x = int(np.argmin(worst))

    new = state.split.copy()
    remaining = x
    for s in order:
        if remaining == 0:
            break
        take = min(remaining, int(new[s, expert, r_src]))
        new[s, expert, r_src] -= take
        new[s, expert, r_dst] += take
        remaining -= take

    old_max = float(state.latencies.max())
    if state.latencies[r_src] < old_max:
        return new, 0.0
    return new, float(state.latencies[r_src] - worst[x])


def _next_move(state: SolverState, spec: ClusterSpec):
    """Bottleneck-first search for a (src, dst, expert) passing the budget gate."""
    lat = state.latencies
    ranks_desc = sorted(range(spec.ep), key=lambda r: (-lat[r], r))
    ranks_asc = sorted(range(spec.ep), key=lambda r: (lat[r], r))
    for src in ranks_desc:
        for dst in ranks_asc:
            if dst == src or lat[dst] >= lat[src]:
                continue
            tried = []
            while True:
                e = select_heavy_expert(src, state, dst=dst, exclude=tried)
                if e is None:
                    break
                if state.hosts(dst, e):
                    return src, dst, e
                capped = state.max_replicas is not None and \
                    sum(map(len, state.delta_in)) >= state.max_replicas
                if not capped and check_dual_budget(src, dst, e, state, spec):
                    return src, dst, e
                state.invalid.add((src, dst, e))
                tried.append(e)
    return None


def solve(routing: SourceRouting, base_placement: Placement, spec: ClusterSpec,
          windows: Sequence[float], debug: bool = False, max_replicas: Optional[int] = None) -> SolverState:
    """Run the greedy loop and return the final solver state.

    ``max_replicas`` optionally caps the plan's total new replicas (the
    per-rank budget still applies).
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.shape != (spec.ep,):
        raise ValueError(f"window list has length {windows.size}, expected ep={spec.ep}")
    lam_in, lam_out = perf_model.dedup_factors(spec, routing, base_placement)
    init = init_locality_first(routing, base_placement)
    state = SolverState(spec=spec, base=base_placement, split=np.array(init.split),
                        lam_in=lam_in, lam_out=lam_out, windows=windows, max_replicas=max_replicas)
    state.history.append(float(state.latencies.max()))
    eps = spec.solver_epsilon
    if eps is None:
        eps = 0.005 * float(state.latencies.max())
    while True:
        move = _next_move(state, spec)
        if move is None:
            break
        src, dst, e = move
        if state.k + state.rejected >= spec.solver_max_iters:
            break
        new_split, gain = water_filling_rebalance(e, src, dst, state, spec)
        if gain <= eps:
            # a dud candidate only rules out itself; stop once the
            # bottleneck rank has nothing better to offer
            if state.latencies[src] < state.latencies.max():
                break
            state.invalid.add((src, dst, e))
            state.rejected += 1
            continue
        state.add_replica(src, dst, e)
        state.split = new_split
        state.refresh()
        state.k += 1
        state.history.append(float(state.latencies.max()))
        if debug:
            state.check()
    return state


def _finalize(state: SolverState, spec: ClusterSpec) -> Plan:
    feas = tuple(
        (perf_model.transfer_latency(state.delta_in[r], state.delta_out[r], spec), float(state.windows[r]))
        for r in range(spec.ep)
    )
    degraded = tuple(r for r, (t, w) in enumerate(feas) if t > w)
    return Plan(
        placement=state.placement(),
        assignment=Assignment(state.split),
        delta_in=tuple(tuple(d) for d in state.delta_in),
        delta_out=tuple(tuple(d) for d in state.delta_out),
        iterations_used=state.k,
        feasibility=feas,
        degraded_ranks=degraded,
        rejected_candidates=state.rejected,
    )


def plan(routing: SourceRouting, base_placement: Placement, spec: ClusterSpec,
         windows: Sequence[float], validate: bool = True, max_replicas: Optional[int] = None) -> Plan:
    if validate:
        check_scenario(spec, routing, base_placement)
    return _finalize(solve(routing, base_placement, spec, windows, max_replicas=max_replicas), spec)


def plan_latency(p: Plan, routing: SourceRouting, spec: ClusterSpec) -> float:
    """Bottleneck of compute + round-trip comm for a plan (the planner objective)."""
    lams = perf_model.dedup_factors(spec, routing, Placement(p.placement.base))
    return float(perf_model.rank_latencies(p.assignment, p.placement, spec, lams).max())


def plan_violations(p: Plan, routing: SourceRouting, spec: ClusterSpec) -> list[str]:
    """Machine check of conservation, validity, budget and hiding windows."""
    out = list(p.assignment.violations(routing, p.placement))
    out.extend(p.placement.violations(spec))
    for r in range(spec.ep):
        t = perf_model.transfer_latency(p.delta_in[r], p.delta_out[r], spec)
        if t > p.feasibility[r][1]:
            out.append(f"plan: rank {r} transfer {t:.3e}s exceeds window {p.feasibility[r][1]:.3e}s")
        if abs(t - p.feasibility[r][0]) > 0:
            out.append(f"plan: rank {r} certificate does not match recomputed transfer")
    return out


# brute-force reference --------------------------------------------------------

class OracleTooLarge(ValueError):
    pass


def _compositions(q: int, m: int):
    """All length-m non-negative integer vectors summing to q."""
    if m == 1:
        yield (q,)
        return
    for i in range(q + 1):
        for rest in _compositions(q - i, m - 1):
            yield (i,) + rest


def _allocations(c: int, m: int, g: int) -> np.ndarray:
    """Ways to split c tokens over m hosts in chunks of g (remainder is one extra chunk)."""
    q, rem = divmod(c, g)
    rows = []
    for comp in _compositions(q, m):
        base = np.array(comp, dtype=np.int64) * g
        if rem == 0:
            rows.append(base)
        else:
            for h in range(m):
                v = base.copy()
                v[h] += rem
                rows.append(v)
    return np.unique(np.array(rows, dtype=np.int64), axis=0)


def _senders_fit(replicas, host, spec: ClusterSpec, windows) -> bool:
    """Do the copies (each read from the expert's base host) fit every window?"""
    ep = spec.ep
    n_in = np.bincount([r for _, r in replicas], minlength=ep)
    n_out = np.bincount([int(host[e]) for e, _ in replicas], minlength=ep)
    unit = spec.expert_weight_bytes / spec.net_bandwidth
    return all(max(n_in[r], n_out[r]) * unit <= windows[r] for r in range(ep))


def oracle_optimal(routing: SourceRouting, base_placement: Placement, spec: ClusterSpec,
                   windows: Sequence[float], max_replicas: int = 3, granularity: int = 10,
                   max_ep: int = 4, max_experts: int = 8, max_units: int = 6):
    """Exhaustive minimum of the bottleneck latency over replica sets and token splits.

    Replica sets of up to ``max_replicas`` (respecting the per-rank budget and
    the windows, with copies read from base hosts) are enumerated; for each, every split of
    each replicated expert's per-source tokens over its hosts on a
    ``granularity`` lattice is evaluated. Sets that leave the best-known
    bottleneck untouched are pruned by the fixed latency of unaffected ranks.
    """
    ep, E = routing.counts.shape
    g = int(granularity)
    if ep > max_ep or E > max_experts or max_replicas > 3 or g < 1:
        raise OracleTooLarge("instance too large for oracle")
    if int(routing.counts.max(initial=0)) > g * max_units:
        raise OracleTooLarge("instance too large for oracle")
    windows = np.asarray(windows, dtype=np.float64)
    if windows.shape != (ep,):
        raise ValueError("window list length must equal ep")
    lam_in, lam_out = perf_model.dedup_factors(spec, routing, base_placement)
    cin = spec.hidden_bytes / lam_in
    cout = spec.hidden_bytes / lam_out
    bw = spec.net_bandwidth
    host = base_placement.base_host()
    counts = routing.counts
    t = perf_model.expert_compute_time

    def contributions(e, hosts):
        """Per-option (comp, in, out) rank vectors of expert e served by ``hosts``."""
        m = len(hosts)
        per_src = [_allocations(int(counts[s, e]), m, g) for s in range(ep)]
        combos = itertools.product(*[range(len(a)) for a in per_src])
        idx = np.array(list(combos), dtype=np.int64)
        alloc = np.stack([per_src[s][idx[:, s]] for s in range(ep)], axis=1)  # (n, src, host)
        n = alloc.shape[0]
        comp = np.zeros((n, ep))
        vin = np.zeros((n, ep))
        vout = np.zeros((n, ep))
        for j, h in enumerate(hosts):
            tot = alloc[:, :, j].sum(axis=1)
            comp[:, h] += t(tot, spec)
            remote = tot - alloc[:, h, j]
            vin[:, h] += remote * cin[h]
            for s in range(ep):
                if s != h:
                    vout[:, s] += alloc[:, s, j] * cout[s]
        vec = np.concatenate([comp, vin, vout], axis=1)
        uniq, first = np.unique(vec, axis=0, return_index=True)
        return uniq, alloc[first]

    # fixed part: every expert served only by its base host
    base_split = init_locality_first(routing, base_placement).split
    fixed_assign = Assignment(base_split)
    base_comp = perf_model.rank_compute_latency(fixed_assign, base_placement, spec, validate=False)
    base_in, base_out = perf_model.traffic_volumes(fixed_assign, base_placement, spec, (lam_in, lam_out),
                                                   validate=False)
    base_lat = base_comp + 2.0 * np.maximum(base_in, base_out) / bw
    best = float(base_lat.max())
    best_cfg = ((), {})

    slots = [(e, r) for e in range(E) for r in range(ep) if r != host[e]]
    for size in range(1, max_replicas + 1):
        for reps in itertools.combinations(slots, size):
            per_rank = np.bincount([r for _, r in reps], minlength=ep)
            if (per_rank > spec.replica_budget_per_rank).any():
                continue
            hosts_of = {}
            for e, r in reps:
                hosts_of.setdefault(e, {int(host[e])}).add(r)
            # non-host sources send the same bytes whichever host serves them
            affected = set().union(*hosts_of.values())
            untouched = [r for r in range(ep) if r not in affected]
            if untouched and base_lat[untouched].max() >= best:
                continue
            if not _senders_fit(reps, host, spec, windows):
                continue
            # remove replicated experts from the fixed part
            comp0 = base_comp.copy()
            in0 = base_in.copy()
            out0 = base_out.copy()
            for e in hosts_of:
                h = host[e]
                comp0[h] -= t(int(counts[:, e].sum()), spec)
                in0[h] -= (int(counts[:, e].sum()) - int(counts[h, e])) * cin[h]
                for s in range(ep):
                    if s != h:
                        out0[s] -= int(counts[s, e]) * cout[s]
            experts = sorted(hosts_of)
            tables = [contributions(e, sorted(hosts_of[e])) for e in experts]
            total = np.concatenate([comp0, in0, out0])[None, :]
            index = [np.zeros(1, dtype=np.int64)]
            for vec, _ in tables:
                n_prev = total.shape[0]
                total = (total[:, None, :] + vec[None, :, :]).reshape(-1, 3 * ep)
                index = [np.repeat(ix, vec.shape[0]) for ix in index] + [np.tile(np.arange(vec.shape[0]), n_prev)]
            lat = total[:, :ep] + 2.0 * np.maximum(total[:, ep:2 * ep], total[:, 2 * ep:]) / bw
            worst = lat.max(axis=1)
            i = int(np.argmin(worst))
            if worst[i] < best:
                best = float(worst[i])
                best_cfg = (reps, {e: (sorted(hosts_of[e]), tables[j][1][index[j + 1][i]])
                                   for j, e in enumerate(experts)})

    reps, chosen = best_cfg
    split = base_split.copy()
    for e, (hosts, alloc) in chosen.items():
        split[:, e, :] = 0
        for j, h in enumerate(hosts):
            split[:, e, h] = alloc[:, j]
    delta_in = [[] for _ in range(ep)]
    for e, r in reps:
        delta_in[r].append(e)
    delta_out = [[] for _ in range(ep)]
    for e, _ in reps:
        delta_out[int(host[e])].append(e)
    feas = tuple((perf_model.transfer_latency(delta_in[r], delta_out[r], spec), float(windows[r]))
                 for r in range(ep))
    p = Plan(
        placement=base_placement.with_replicas(delta_in),
        assignment=Assignment(split),
        delta_in=tuple(tuple(d) for d in delta_in),
        delta_out=tuple(tuple(d) for d in delta_out),
        iterations_used=0,
        feasibility=feas,
        degraded_ranks=tuple(r for r, (tt, w) in enumerate(feas) if tt > w),
    )
    return best, p
