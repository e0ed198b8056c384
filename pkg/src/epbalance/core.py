"""Shared domain types: cluster constants, routing, placement, assignment, plan.

Everything here is immutable after construction. Numpy arrays held by these
types are flagged read-only. Validation is report-based: each type exposes
``violations()`` returning human-readable strings, and ``validate_scenario``
aggregates them across a (cluster, routing, placement) triple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


def _frozen(arr, dtype=None) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EfficiencyCurve:
    """GEMM efficiency as a function of tokens per expert.

    ``saturating``: eta(n) = min(1, n / n_sat).
    ``piecewise_table``: linear interpolation between ``(tokens, eta)``
    breakpoints, clamped at both ends.
    """

    kind: str = "saturating"
    n_sat: float = 64.0
    table: tuple = ()

    def violations(self) -> list[str]:
        out = []
        if self.kind == "saturating":
            if not self.n_sat > 0:
                out.append("efficiency_curve: n_sat must be positive")
        elif self.kind == "piecewise_table":
            if len(self.table) == 0:
                out.append("efficiency_curve: empty table")
            xs = [float(x) for x, _ in self.table]
            ys = [float(y) for _, y in self.table]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                out.append("efficiency_curve: breakpoints not strictly increasing")
            if any(not (0.0 < y <= 1.0) for y in ys):
                out.append("efficiency_curve: eta outside (0, 1]")
            if any(b < a for a, b in zip(ys, ys[1:])):
                out.append("efficiency_curve: eta decreasing in token count")
        else:
            out.append(f"efficiency_curve: unknown kind {self.kind!r}")
        return out

    def eta(self, tokens):
        """Vectorized efficiency. Defined for tokens >= 1; zero maps to eta(1)."""
        n = np.maximum(np.asarray(tokens, dtype=np.float64), 1.0)
        if self.kind == "saturating":
            return np.minimum(1.0, n / self.n_sat)
        xs = np.array([x for x, _ in self.table], dtype=np.float64)
        ys = np.array([y for _, y in self.table], dtype=np.float64)
        return np.interp(n, xs, ys)

    def to_dict(self) -> dict:
        if self.kind == "saturating":
            return {"kind": self.kind, "n_sat": self.n_sat}
        return {"kind": self.kind, "table": [list(p) for p in self.table]}

    @classmethod
    def from_dict(cls, d: dict) -> "EfficiencyCurve":
        kind = d.get("kind", "saturating")
        if kind == "piecewise_table":
            return cls(kind=kind, table=tuple((float(x), float(y)) for x, y in d["table"]))
        return cls(kind=kind, n_sat=float(d.get("n_sat", 64.0)))


@dataclass(frozen=True)
class DedupModel:
    """Token deduplication factors for all-to-all traffic.

    ``constant`` uses fixed lambda_in / lambda_out on every rank. ``fanin``
    derives per-rank factors from per-token expert lists (see
    ``dedup_factors``), falling back to 1 when no token metadata exists.
    """

    kind: str = "constant"
    lambda_in: float = 1.0
    lambda_out: float = 1.0

    def violations(self) -> list[str]:
        out = []
        if self.kind not in ("constant", "fanin"):
            out.append(f"dedup_model: unknown kind {self.kind!r}")
        if self.kind == "constant" and (self.lambda_in < 1.0 or self.lambda_out < 1.0):
            out.append("dedup_model: lambda must be >= 1")
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda_in": self.lambda_in, "lambda_out": self.lambda_out}

    @classmethod
    def from_dict(cls, d: dict) -> "DedupModel":
        return cls(
            kind=d.get("kind", "constant"),
            lambda_in=float(d.get("lambda_in", 1.0)),
            lambda_out=float(d.get("lambda_out", 1.0)),
        )


@dataclass(frozen=True)
class ClusterSpec:
    """Hardware and model constants for one expert-parallel group.

    Sizes are bytes, rates are per second, durations are seconds.
    ``solver_epsilon=None`` means 0.5% of the initial bottleneck latency.
    """

    ep: int
    num_experts: int
    top_k: int
    hidden_bytes: float
    expert_weight_bytes: float
    per_token_flops: float
    peak_flops: float
    net_bandwidth: float
    efficiency_curve: EfficiencyCurve = field(default_factory=EfficiencyCurve)
    dedup_model: DedupModel = field(default_factory=DedupModel)
    replica_budget_per_rank: int = 3
    replica_slots_per_rank: int = 6
    solver_max_iters: int = 16
    solver_epsilon: Optional[float] = None
    attention_duration: float = 2e-4
    predict_allgather_cost: float = 1e-5
    planner_iter_cost: float = 2e-6
    predictor_flops_per_token: float = 0.0
    update_cost: float = 5e-6

    @property
    def experts_per_rank(self) -> int:
        return self.num_experts // self.ep

    def violations(self) -> list[str]:
        out = []
        if self.ep < 1:
            out.append("cluster: ep must be positive")
        if self.num_experts < 1:
            out.append("cluster: num_experts must be positive")
        if self.ep >= 1 and (self.num_experts < self.ep or self.num_experts % self.ep):
            out.append("cluster: num_experts must be a multiple of ep (even base sharding)")
        if not 1 <= self.top_k <= self.num_experts:
            out.append("cluster: top_k must be in [1, num_experts]")
        for name in ("hidden_bytes", "expert_weight_bytes", "per_token_flops", "peak_flops", "net_bandwidth"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                out.append(f"cluster: {name} must be positive and finite")
        if self.replica_budget_per_rank < 0 or self.replica_slots_per_rank < 0:
            out.append("cluster: replica budget/slots must be non-negative")
        if 2 * self.replica_budget_per_rank > self.replica_slots_per_rank:
            out.append("cluster: replica budget exceeds half the slots (double buffering)")
        if self.solver_max_iters < 1:
            out.append("cluster: solver_max_iters must be positive")
        if self.solver_epsilon is not None and self.solver_epsilon < 0:
            out.append("cluster: solver_epsilon must be non-negative")
        for name in ("attention_duration", "predict_allgather_cost", "planner_iter_cost",
                     "predictor_flops_per_token", "update_cost"):
            if getattr(self, name) < 0:
                out.append(f"cluster: {name} must be non-negative")
        out.extend(self.efficiency_curve.violations())
        out.extend(self.dedup_model.violations())
        return out

    def base_placement(self) -> "Placement":
        """Contiguous even sharding: expert e lives on rank e // (E / ep)."""
        base = np.zeros((self.ep, self.num_experts), dtype=bool)
        per = self.experts_per_rank
        for e in range(self.num_experts):
            base[e // per, e] = True
        return Placement(base=base)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["efficiency_curve"] = self.efficiency_curve.to_dict()
        d["dedup_model"] = self.dedup_model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSpec":
        kw = dict(d)
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"cluster: unknown fields {sorted(unknown)}")
        if "efficiency_curve" in kw:
            kw["efficiency_curve"] = EfficiencyCurve.from_dict(kw["efficiency_curve"])
        if "dedup_model" in kw:
            kw["dedup_model"] = DedupModel.from_dict(kw["dedup_model"])
        return cls(**kw)


class SourceRouting:
    """Tokens routed from each source rank to each expert for one layer step.

    ``counts[r_s, e]`` is the number of tokens originating on ``r_s`` that
    selected expert ``e``. ``token_experts`` optionally carries, per source
    rank, an ``(n_tokens, k)`` array of expert ids ordered by gate score; when
    given, ``counts`` is derived from it. ``declared_batch`` optionally states
    the global token count B so conservation can be checked.
    """

    __slots__ = ("counts", "token_experts", "declared_batch")

    def __init__(self, counts=None, token_experts=None, declared_batch: Optional[int] = None,
                 num_experts: Optional[int] = None):
        if token_experts is not None:
            token_experts = tuple(_frozen(t, np.int64).reshape(len(t), -1) if len(t) else
                                  _frozen(np.zeros((0, 0), dtype=np.int64)) for t in token_experts)
            if counts is None:
                if num_experts is None:
                    raise ValueError("num_experts required to derive counts from token_experts")
                counts = np.stack([np.bincount(t.ravel(), minlength=num_experts) for t in token_experts])
        if counts is None:
            raise ValueError("SourceRouting needs counts or token_experts")
        object.__setattr__(self, "counts", _frozen(counts, np.int64))
        object.__setattr__(self, "token_experts", token_experts)
        object.__setattr__(self, "declared_batch", declared_batch)

    def __setattr__(self, name, value):
        raise AttributeError("SourceRouting is immutable")

    def __eq__(self, other):
        if not isinstance(other, SourceRouting):
            return NotImplemented
        if self.declared_batch != other.declared_batch or not np.array_equal(self.counts, other.counts):
            return False
        if (self.token_experts is None) != (other.token_experts is None):
            return False
        if self.token_experts is None:
            return True
        return all(np.array_equal(a, b) for a, b in zip(self.token_experts, other.token_experts))

    __hash__ = None

    def __repr__(self):
        return f"SourceRouting(ep={self.ep}, E={self.num_experts}, total={self.total_hits})"

    @property
    def ep(self) -> int:
        return self.counts.shape[0]

    @property
    def num_experts(self) -> int:
        return self.counts.shape[1]

    @property
    def expert_loads(self) -> np.ndarray:
        """Global per-expert token counts n_e (column sums)."""
        return self.counts.sum(axis=0)

    @property
    def total_hits(self) -> int:
        return int(self.counts.sum())

    def batch_size(self, top_k: int) -> int:
        return self.total_hits // top_k

    def violations(self, spec: Optional[ClusterSpec] = None) -> list[str]:
        out = []
        if self.counts.ndim != 2:
            return ["routing: counts must be a 2-D matrix"]
        if (self.counts < 0).any():
            out.append("routing: negative token count")
        if self.token_experts is not None:
            if len(self.token_experts) != self.ep:
                out.append("routing: token_experts length differs from ep")
            else:
                for r, t in enumerate(self.token_experts):
                    srt = np.sort(t, axis=1)
                    if t.size and (srt[:, 1:] == srt[:, :-1]).any():
                        out.append(f"routing: duplicate expert within a token on rank {r}")
                        break
                derived = np.stack([np.bincount(t.ravel(), minlength=self.num_experts)[: self.num_experts]
                                    for t in self.token_experts])
                if derived.shape != self.counts.shape or not np.array_equal(derived, self.counts):
                    out.append("routing: counts disagree with token_experts")
        if spec is not None:
            if self.counts.shape != (spec.ep, spec.num_experts):
                out.append(f"routing: counts shape {self.counts.shape} != (ep, E) = {(spec.ep, spec.num_experts)}")
            if self.total_hits % spec.top_k:
                out.append("routing: token conservation violated (total hits not a multiple of top_k)")
            if self.declared_batch is not None and self.total_hits != self.declared_batch * spec.top_k:
                out.append(f"routing: token conservation violated (sum {self.total_hits} != B*k = "
                           f"{self.declared_batch * spec.top_k})")
        return out

    def to_dict(self) -> dict:
        d = {"counts": self.counts.tolist()}
        if self.declared_batch is not None:
            d["declared_batch"] = self.declared_batch
        if self.token_experts is not None:
            d["token_experts"] = [t.tolist() for t in self.token_experts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SourceRouting":
        te = d.get("token_experts")
        counts = d.get("counts")
        num_e = len(counts[0]) if counts else None
        if te is not None:
            te = [np.array(t, dtype=np.int64).reshape(len(t), -1) for t in te]
        return cls(counts=counts, token_experts=te, declared_batch=d.get("declared_batch"), num_experts=num_e)


class Placement:
    """Base sharding plus per-rank replica sets.

    ``base[r, e]`` is True iff rank r natively hosts expert e. ``replicas[r]``
    is the ordered tuple of redundant experts currently placed on r.
    """

    __slots__ = ("base", "replicas")

    def __init__(self, base, replicas: Optional[Sequence[Sequence[int]]] = None):
        base = _frozen(base, bool)
        if replicas is None:
            replicas = [()] * base.shape[0]
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "replicas", tuple(tuple(int(e) for e in rs) for rs in replicas))

    def __setattr__(self, name, value):
        raise AttributeError("Placement is immutable")

    def __eq__(self, other):
        if not isinstance(other, Placement):
            return NotImplemented
        return np.array_equal(self.base, other.base) and self.replicas == other.replicas

    __hash__ = None

    def __repr__(self):
        return f"Placement(ep={self.ep}, E={self.num_experts}, replicas={self.replicas})"

    @property
    def ep(self) -> int:
        return self.base.shape[0]

    @property
    def num_experts(self) -> int:
        return self.base.shape[1]

    def base_host(self) -> np.ndarray:
        """Per-expert native rank (valid only when base is a partition)."""
        return np.argmax(self.base, axis=0)

    def hosted(self) -> np.ndarray:
        """ep x E boolean mask of base plus replica hosting."""
        h = np.array(self.base, copy=True)
        for r, rs in enumerate(self.replicas):
            for e in rs:
                h[r, e] = True
        return h

    def with_replicas(self, replicas) -> "Placement":
        return Placement(self.base, replicas)

    def violations(self, spec: Optional[ClusterSpec] = None) -> list[str]:
        out = []
        if self.base.ndim != 2:
            return ["placement: base must be a 2-D matrix"]
        per_expert = self.base.sum(axis=0)
        if (per_expert != 1).any():
            bad = np.flatnonzero(per_expert != 1).tolist()
            out.append(f"placement: base not a partition (experts {bad[:8]})")
        if len(self.replicas) != self.ep:
            out.append("placement: replicas list length differs from ep")
        for r, rs in enumerate(self.replicas[: self.ep]):
            if len(set(rs)) != len(rs):
                out.append(f"placement: duplicate replica on rank {r}")
            for e in rs:
                if not 0 <= e < self.num_experts:
                    out.append(f"placement: replica expert {e} out of range on rank {r}")
                elif self.base[r, e]:
                    out.append(f"placement: expert {e} replicated onto its own base rank {r}")
            if spec is not None and len(rs) > spec.replica_budget_per_rank:
                out.append(f"placement: rank {r} holds {len(rs)} replicas > budget {spec.replica_budget_per_rank}")
        if spec is not None and self.base.shape != (spec.ep, spec.num_experts):
            out.append(f"placement: base shape {self.base.shape} != (ep, E)")
        return out

    def to_dict(self) -> dict:
        return {"base": self.base.astype(int).tolist(), "replicas": [list(rs) for rs in self.replicas]}

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        base = np.array(d["base"], dtype=bool)
        return cls(base, d.get("replicas"))


class Assignment:
    """Token split ``split[r_s, e, r_t]`` of routed tokens onto hosting ranks.

    Stored dense (ep x E x ep int64, read-only); marginals are cached on
    construction.
    """

    __slots__ = ("split", "per_rank_expert", "rank_loads")

    def __init__(self, split):
        split = _frozen(split, np.int64)
        object.__setattr__(self, "split", split)
        # n_{e, r_t} laid out as (r_t, e) to match ep x E conventions elsewhere
        object.__setattr__(self, "per_rank_expert", _frozen(split.sum(axis=0).T))
        object.__setattr__(self, "rank_loads", _frozen(self.per_rank_expert.sum(axis=1)))

    def __setattr__(self, name, value):
        raise AttributeError("Assignment is immutable")

    def __eq__(self, other):
        if not isinstance(other, Assignment):
            return NotImplemented
        return np.array_equal(self.split, other.split)

    __hash__ = None

    def __repr__(self):
        return f"Assignment(loads={self.rank_loads.tolist()})"

    @property
    def ep(self) -> int:
        return self.split.shape[0]

    @property
    def num_experts(self) -> int:
        return self.split.shape[1]

    def source_counts(self) -> np.ndarray:
        return self.split.sum(axis=2)

    def violations(self, routing: Optional[SourceRouting] = None,
                   placement: Optional[Placement] = None) -> list[str]:
        out = []
        if (self.split < 0).any():
            out.append("assignment: negative token count")
        if routing is not None and not np.array_equal(self.source_counts(), routing.counts):
            out.append("assignment: conservation violated (split does not sum to routing counts)")
        if placement is not None:
            used = self.per_rank_expert > 0
            bad = used & ~placement.hosted()
            if bad.any():
                r, e = map(int, np.argwhere(bad)[0])
                out.append(f"assignment: routing validity violated (expert {e} served on rank {r} without hosting it)")
        return out

    def triplets(self) -> list[list[int]]:
        idx = np.argwhere(self.split > 0)
        return [[int(a), int(b), int(c), int(self.split[a, b, c])] for a, b, c in idx]

    def to_dict(self) -> dict:
        ep, E, _ = self.split.shape
        return {"ep": ep, "num_experts": E, "triplets": self.triplets()}

    @classmethod
    def from_dict(cls, d: dict) -> "Assignment":
        ep, E = d["ep"], d["num_experts"]
        split = np.zeros((ep, E, ep), dtype=np.int64)
        for rs, e, rt, n in d["triplets"]:
            split[rs, e, rt] = n
        return cls(split)


@dataclass(frozen=True)
class Plan:
    """Planner output for one layer.

    ``feasibility`` holds per-rank ``(transfer_s, window_s)`` pairs;
    ``degraded_ranks`` lists ranks whose transfer exceeds the window (empty
    for certified plans). ``rejected_candidates`` counts moves the solver
    evaluated and dropped; together with ``iterations_used`` it sizes the
    solver's running time.
    """

    placement: Placement
    assignment: Assignment
    delta_in: tuple
    delta_out: tuple
    iterations_used: int
    feasibility: tuple
    degraded_ranks: tuple = ()
    rejected_candidates: int = 0

    @property
    def evaluations(self) -> int:
        return self.iterations_used + self.rejected_candidates

    @property
    def certified(self) -> bool:
        return not self.degraded_ranks

    @property
    def num_replicas(self) -> int:
        return sum(len(d) for d in self.delta_in)

    def violations(self, spec: Optional[ClusterSpec] = None) -> list[str]:
        out = []
        if tuple(tuple(d) for d in self.delta_in) != self.placement.replicas:
            out.append("plan: delta_in inconsistent with placement replicas")
        flagged = tuple(r for r, (t, w) in enumerate(self.feasibility) if t > w)
        if flagged != tuple(self.degraded_ranks):
            out.append("plan: degraded rank list inconsistent with feasibility certificates")
        if spec is not None:
            out.extend(self.placement.violations(spec))
        return out

    def to_dict(self) -> dict:
        return {
            "placement": self.placement.to_dict(),
            "assignment": self.assignment.to_dict(),
            "delta_in": [list(d) for d in self.delta_in],
            "delta_out": [list(d) for d in self.delta_out],
            "iterations_used": self.iterations_used,
            "feasibility": [{"rank": r, "transfer_s": t, "window_s": w} for r, (t, w) in enumerate(self.feasibility)],
            "degraded_ranks": list(self.degraded_ranks),
            "rejected_candidates": self.rejected_candidates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Plan":
        return cls(
            placement=Placement.from_dict(d["placement"]),
            assignment=Assignment.from_dict(d["assignment"]),
            delta_in=tuple(tuple(x) for x in d["delta_in"]),
            delta_out=tuple(tuple(x) for x in d["delta_out"]),
            iterations_used=int(d["iterations_used"]),
            feasibility=tuple((float(f["transfer_s"]), float(f["window_s"])) for f in d["feasibility"]),
            degraded_ranks=tuple(d.get("degraded_ranks", ())),
            rejected_candidates=int(d.get("rejected_candidates", 0)),
        )


class ScenarioError(ValueError):
    """Raised when a scenario violates one or more invariants."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def validate_scenario(spec: ClusterSpec, routing: SourceRouting, placement: Placement) -> list[str]:
    """Return every violated invariant across the three objects (empty = valid)."""
    report = list(spec.violations())
    report.extend(routing.violations(spec))
    report.extend(placement.violations(spec))
    return report


def check_scenario(spec: ClusterSpec, routing: SourceRouting, placement: Placement) -> None:
    problems = validate_scenario(spec, routing, placement)
    if problems:
        raise ScenarioError(problems)
