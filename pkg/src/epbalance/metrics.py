"""Skew statistics: imbalance ratio over ranks and its per-step series."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .core import Assignment, Placement, SourceRouting


def imbalance_ratio(loads) -> float:
    """max(load) / mean(load). Raises on an all-zero workload."""
    arr = np.asarray(loads, dtype=np.float64)
    if arr.size == 0 or not (arr > 0).any():
        raise ValueError("empty workload")
    return float(arr.max() / arr.mean())


def rank_loads(source: Union[SourceRouting, Assignment], placement: Placement) -> np.ndarray:
    """Per-rank token counts.

    A SourceRouting is read with sharded semantics (every token of expert e
    lands on its base host); an Assignment reports its own per-rank totals.
    """
    if isinstance(source, Assignment):
        return np.array(source.rank_loads, dtype=np.int64)
    return (placement.base.astype(np.int64) @ source.expert_loads).astype(np.int64)


@dataclass
class IRSeries:
    steps: list = field(default_factory=list)
    ir_tokens: list = field(default_factory=list)
    ir_latency: list = field(default_factory=list)

    def append(self, step: int, ir_tok: float, ir_lat: float) -> None:
        self.steps.append(step)
        self.ir_tokens.append(ir_tok)
        self.ir_latency.append(ir_lat)

    def violations(self) -> list[str]:
        bad = [s for s, v in zip(self.steps, self.ir_tokens) if v < 1 - 1e-12]
        return [f"ir series: value below 1 at steps {bad[:5]}"] if bad else []

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "ir_tokens", "ir_latency"])
        for row in zip(self.steps, self.ir_tokens, self.ir_latency):
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
        return buf.getvalue()


def jensen_shannon(p: Sequence[float], q: Sequence[float]) -> float:
    """JS divergence in bits (bounded by 1)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)
