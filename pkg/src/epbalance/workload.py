"""Seeded synthetic routing traces.

Expert popularity comes from Zipf-shaped "topic" distributions, each layer
getting its own permutation of expert ids. Requests ("slots") live on a
source rank and draw their tokens' expert sets from their topic. Regimes:

- ``prefill_burst``: every step is a fresh burst whose slots share one or
  two topics, giving high instantaneous skew.
- ``decode_churn``: persistent slots; a ``churn_rate`` fraction is replaced
  with new random topics each step, so the hot set drifts.
- ``repeat_skew``: a single sharp topic (many copies of one prompt).

Shift events re-draw every topic permutation from a new seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .core import ClusterSpec, SourceRouting

REGIMES = ("prefill_burst", "decode_churn", "repeat_skew")
DEFAULT_SKEW = {"prefill_burst": 1.2, "decode_churn": 1.2, "repeat_skew": 1.5}


def derive_seed(seed: int, *parts) -> int:
    """Stable 63-bit sub-seed from a root seed and a purpose tuple."""
    h = hashlib.sha256(repr((int(seed),) + tuple(parts)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def rng_for(seed: int, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *parts)))


@dataclass(frozen=True)
class WorkloadScript:
    regime: str
    steps: int
    tokens_per_step: int
    skew: Optional[float] = None
    churn_rate: float = 0.0
    shift_events: tuple = ()
    seed: int = 0
    num_layers: int = 1
    num_topics: int = 4
    slots: int = 64
    burst_topics: int = 1
    locality_bias: float = 0.0
    # decode_churn only: sharded-IR band the topic draws must land in (None disables)
    ir_band: Optional[tuple] = (1.4, 2.3)

    def violations(self, spec: Optional[ClusterSpec] = None) -> list[str]:
        out = []
        if self.regime not in REGIMES:
            out.append(f"workload: unknown regime {self.regime!r}")
        if self.steps < 1:
            out.append("workload: steps must be positive")
        if self.num_layers < 1:
            out.append("workload: num_layers must be positive")
        if self.skew is not None and self.skew < 0:
            out.append("workload: skew must be non-negative")
        if not 0.0 <= self.churn_rate <= 1.0:
            out.append("workload: churn_rate outside [0, 1]")
        if not 0.0 <= self.locality_bias < 1.0:
            out.append("workload: locality_bias outside [0, 1)")
        if self.num_topics < 1 or self.slots < 1 or not 1 <= self.burst_topics <= self.num_topics:
            out.append("workload: topic/slot counts invalid")
        if self.ir_band is not None and not 1.0 <= self.ir_band[0] < self.ir_band[1]:
            out.append("workload: ir_band must satisfy 1 <= lo < hi")
        for step, _ in self.shift_events:
            if not 0 <= step < self.steps:
                out.append(f"workload: shift event at step {step} outside [0, {self.steps})")
        if spec is not None:
            if self.tokens_per_step < spec.ep:
                out.append("workload: fewer tokens than ranks")
            if self.slots % spec.ep:
                out.append("workload: slots must be a multiple of ep")
            if self.tokens_per_step % self.slots:
                out.append("workload: tokens_per_step must be a multiple of slots")
        return out

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["shift_events"] = [list(ev) for ev in self.shift_events]
        d["ir_band"] = None if self.ir_band is None else list(self.ir_band)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadScript":
        kw = dict(d)
        kw["shift_events"] = tuple(tuple(int(x) for x in ev) for ev in kw.get("shift_events", ()))
        if kw.get("ir_band") is not None:
            kw["ir_band"] = tuple(float(x) for x in kw["ir_band"])
        return cls(**kw)


def apply_shift(script: WorkloadScript, step: int, seed: int) -> WorkloadScript:
    """Append a regime change at ``step``; duplicates are ignored."""
    if not 0 <= step < script.steps:
        raise ValueError(f"shift step {step} outside [0, {script.steps})")
    events = set(script.shift_events) | {(int(step), int(seed))}
    return replace(script, shift_events=tuple(sorted(events)))


def zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** (-s)
    return w / w.sum()


def cap_distribution(p: np.ndarray, cap: float) -> np.ndarray:
    """Clip probabilities at ``cap`` and redistribute the excess proportionally."""
    p = np.asarray(p, dtype=np.float64) / np.sum(p)
    if cap * p.size < 1.0:
        raise ValueError("cap too small for a distribution")
    for _ in range(p.size):
        over = p > cap
        if not over.any():
            break
        excess = (p[over] - cap).sum()
        p[over] = cap
        free = ~over & (p < cap)
        p[free] += excess * p[free] / p[free].sum()
    return p


def _race_topk(rng: np.random.Generator, probs: np.ndarray, k: int) -> np.ndarray:
    """Weighted draw of k distinct ids per row, in draw order.

    Exponential race: the k smallest E_i / p_i are a weighted draw without
    replacement.
    """
    with np.errstate(divide="ignore"):
        keys = rng.standard_exponential(size=probs.shape) / probs
    part = np.argpartition(keys, k - 1, axis=1)[:, :k]
    order = np.argsort(np.take_along_axis(keys, part, axis=1), axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


class TraceGenerator:
    """Sequential per-step generator for one script.

    Slot-topic state evolves step by step; token sampling for each step uses
    an RNG derived from (seed, step, layer) so a step's draws never depend on
    how many numbers earlier steps consumed.
    """

    def __init__(self, script: WorkloadScript, spec: ClusterSpec):
        problems = script.violations(spec)
        if problems:
            raise ValueError("; ".join(problems))
        if script.regime == "repeat_skew" and spec.top_k > 8:
            raise ValueError("repeat_skew cannot concentrate top_k > 8 distinct experts on 8 experts")
        self.script = script
        self.spec = spec
        self._step = -1
        self._slot_topics = None
        self._epoch_cache: dict = {}

    # -- distributions -------------------------------------------------------
    def epoch_seed(self, step: int) -> int:
        seed = self.script.seed
        for s, ev_seed in sorted(self.script.shift_events):
            if s <= step:
                seed = derive_seed(ev_seed, "shift")
        return seed

    def topic_dists(self, step: int, layer: int) -> np.ndarray:
        """(num_topics, E) popularity matrix active at ``step`` for ``layer``."""
        key = (self.epoch_seed(step), layer)
        if key not in self._epoch_cache:
            band = self.script.ir_band if self.script.regime == "decode_churn" else None
            for attempt in range(64):
                rows = self._draw_topics(key[0], layer, attempt)
                if band is None or self._inside(rows, band):
                    break
            else:
                raise ValueError(f"workload: no topic draw lands in IR band {band} (skew too high or low?)")
            self._epoch_cache[key] = rows
        return self._epoch_cache[key]

    def _draw_topics(self, seed: int, layer: int, attempt: int) -> np.ndarray:
        E = self.spec.num_experts
        s = self.script.skew if self.script.skew is not None else DEFAULT_SKEW[self.script.regime]
        base = zipf_weights(E, s)
        rows = []
        for t in range(self.script.num_topics):
            parts = ("topic", layer, t) if attempt == 0 else ("topic", layer, t, attempt)
            perm = rng_for(seed, *parts).permutation(E)
            p = np.empty(E)
            p[perm] = base
            rows.append(cap_distribution(p, 1.0 / self.spec.top_k))
        return np.array(rows)

    def _inside(self, rows: np.ndarray, band) -> bool:
        """Does a probe sample from the uniform topic mix sit mid-band?

        Top-k draws without replacement flatten the hot experts, so the check
        samples tokens the same way routing() does. Churn spreads the per-step
        IR around this value; only the central 20% of the band is accepted.
        """
        lo, hi = band
        pad = 0.4 * (hi - lo)
        rng = rng_for(self.script.seed, "band-probe")
        top = _race_topk(rng, np.repeat(rows, 1024, axis=0), self.spec.top_k)
        loads = np.bincount(top.ravel() // self.spec.experts_per_rank, minlength=self.spec.ep)
        ir = loads.max() / loads.mean()
        return lo + pad <= ir <= hi - pad

    def _advance_slots(self, step: int) -> None:
        sc = self.script
        n = sc.slots
        if sc.regime == "repeat_skew":
            self._slot_topics = np.zeros(n, dtype=np.int64)
        elif sc.regime == "prefill_burst":
            rng = rng_for(sc.seed, "burst", step)
            chosen = rng.choice(sc.num_topics, size=sc.burst_topics, replace=False)
            self._slot_topics = chosen[rng.integers(0, sc.burst_topics, size=n)]
        else:
            if self._slot_topics is None:
                rng = rng_for(sc.seed, "slots-init")
                self._slot_topics = rng.integers(0, sc.num_topics, size=n)
            else:
                rng = rng_for(sc.seed, "churn", step)
                k = int(round(sc.churn_rate * n))
                if k:
                    idx = rng.choice(n, size=k, replace=False)
                    self._slot_topics = self._slot_topics.copy()
                    self._slot_topics[idx] = rng.integers(0, sc.num_topics, size=k)

    def advance_to(self, step: int) -> None:
        if step < self._step:
            self._step = -1
            self._slot_topics = None
        while self._step < step:
            self._step += 1
            self._advance_slots(self._step)

    def expert_distribution(self, step: int, layer: int = 0) -> np.ndarray:
        """Expected per-expert share of routed hits at ``step``."""
        self.advance_to(step)
        dists = self.topic_dists(step, layer)
        return dists[self._slot_topics].mean(axis=0)

    # -- sampling ------------------------------------------------------------
    def _slot_dists(self, step: int, layer: int) -> np.ndarray:
        dists = self.topic_dists(step, layer)[self._slot_topics]
        bias = self.script.locality_bias
        if bias > 0:
            ep = self.spec.ep
            per = self.spec.experts_per_rank
            owner = np.arange(self.spec.num_experts) // per
            src = np.arange(dists.shape[0]) % ep
            local = (owner[None, :] == src[:, None]).astype(np.float64)
            dists = (1 - bias) * dists + bias * local * dists / np.maximum((local * dists).sum(1, keepdims=True), 1e-300)
            dists = np.array([cap_distribution(row, 1.0 / self.spec.top_k) for row in dists])
        return dists

    def routing(self, step: int, layer: int) -> SourceRouting:
        self.advance_to(step)
        sc = self.script
        spec = self.spec
        dists = self._slot_dists(step, layer)
        per_slot = sc.tokens_per_step // sc.slots
        rng = rng_for(sc.seed, "tokens", step, layer)
        probs = np.repeat(dists, per_slot, axis=0)
        top = _race_topk(rng, probs, spec.top_k)
        slot_of_token = np.repeat(np.arange(sc.slots), per_slot)
        rank_of_token = slot_of_token % spec.ep
        token_experts = [top[rank_of_token == r] for r in range(spec.ep)]
        return SourceRouting(token_experts=token_experts, num_experts=spec.num_experts,
                             declared_batch=sc.tokens_per_step)

    def step_routings(self, step: int) -> list[SourceRouting]:
        return [self.routing(step, layer) for layer in range(self.script.num_layers)]


def generate(script: WorkloadScript, spec: ClusterSpec) -> Iterator[list[SourceRouting]]:
    """Yield, for each step, the per-layer routings."""
    gen = TraceGenerator(script, spec)
    for step in range(script.steps):
        yield gen.step_routings(step)


def calibrated_routing(spec: ClusterSpec, tokens_per_rank: int, target_ir: float, seed: int) -> SourceRouting:
    """Deterministic routing whose sharded token-IR is close to ``target_ir``.

    Counts are the largest-remainder rounding of a permuted Zipf share; the
    exponent is found by bisection. Raises if the target is out of reach.
    """
    from .metrics import imbalance_ratio, rank_loads

    E, ep, k = spec.num_experts, spec.ep, spec.top_k
    base = spec.base_placement()
    hits_per_rank = tokens_per_rank * k

    def build(perm, s):
        w = zipf_weights(E, s)
        p = np.empty(E)
        p[perm] = w
        p = cap_distribution(p, 1.0 / k)
        raw = p * hits_per_rank
        counts = np.floor(raw).astype(np.int64)
        short = hits_per_rank - int(counts.sum())
        order = np.lexsort((np.arange(E), -(raw - counts)))
        counts[order[:short]] += 1
        return SourceRouting(np.tile(counts, (ep, 1)), declared_batch=tokens_per_rank * ep)

    def ir(perm, s):
        return imbalance_ratio(rank_loads(build(perm, s), base))

    # a permutation caps the reachable IR (hot experts may land on distinct
    # ranks), so later attempts re-draw it
    reach = (1.0, 1.0)
    for attempt in range(64):
        perm = rng_for(seed, "calibrated", attempt).permutation(E)
        lo, hi = 0.0, 4.0
        reach = (ir(perm, lo), ir(perm, hi))
        if reach[0] <= target_ir <= reach[1]:
            break
    else:
        raise ValueError(f"target IR {target_ir} out of reach (last range {reach[0]:.3f}..{reach[1]:.3f})")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ir(perm, mid) < target_ir:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9:
            break
    return build(perm, min((lo, hi), key=lambda s: abs(ir(perm, s) - target_ir)))


def trace_to_dict(routings_per_step: list) -> dict:
    return {"steps": [[r.to_dict() for r in layers] for layers in routings_per_step]}


def trace_from_dict(d: dict) -> list:
    return [[SourceRouting.from_dict(r) for r in layers] for layers in d["steps"]]
