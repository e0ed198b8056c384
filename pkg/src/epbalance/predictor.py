"""Lookahead gate (frozen router prior + zero-initialized SiLU residual) and
a seeded noisy-oracle stand-in, plus routing-fidelity metrics.

Shapes follow the row-major batch convention: hidden states are ``(N, d)``,
logits ``(N, E)``. The residual is ``W2 @ silu(W1 @ h)`` with ``W1: (h, d)``
and ``W2: (E, h)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import SourceRouting
from .workload import rng_for


def silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class LookaheadGate:
    prior_w: np.ndarray   # (E, d), frozen
    prior_b: np.ndarray   # (E,), frozen
    res_w1: np.ndarray    # (h, d)
    res_w2: np.ndarray    # (E, h)

    @property
    def num_experts(self) -> int:
        return self.prior_w.shape[0]

    @property
    def dim(self) -> int:
        return self.prior_w.shape[1]

    @property
    def hidden(self) -> int:
        return self.res_w1.shape[0]

    @classmethod
    def from_router(cls, router_w, router_b, hidden: Optional[int] = None, seed: int = 0,
                    init_scale: Optional[float] = None) -> "LookaheadGate":
        """Clone a router as the frozen prior; W1 random, W2 zero."""
        w = np.array(router_w, dtype=np.float64)
        b = np.array(router_b, dtype=np.float64)
        E, d = w.shape
        h = hidden or max(1, d // 4)
        scale = init_scale if init_scale is not None else 1.0 / math.sqrt(d)
        w1 = rng_for(seed, "gate-w1").normal(0.0, scale, size=(h, d))
        for a in (w, b):
            a.setflags(write=False)
        return cls(w, b, w1, np.zeros((E, h)))

    def to_dict(self) -> dict:
        return {name: {"shape": list(getattr(self, name).shape), "data": getattr(self, name).ravel().tolist()}
                for name in ("prior_w", "prior_b", "res_w1", "res_w2")}

    @classmethod
    def from_dict(cls, d: dict) -> "LookaheadGate":
        arrs = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}
        return cls(**arrs)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "LookaheadGate":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def gate_forward(hidden, gate: LookaheadGate) -> np.ndarray:
    h = np.asarray(hidden, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.shape[1] != gate.dim:
        raise ValueError(f"hidden dim {h.shape[1]} != gate dim {gate.dim}")
    out = h @ gate.prior_w.T + gate.prior_b + silu(h @ gate.res_w1.T) @ gate.res_w2.T
    return out[0] if squeeze else out


def distill_loss(hidden, teacher_logits, gate: LookaheadGate) -> float:
    """Mean cross-entropy of the gate's softmax against the teacher's softmax."""
    q = softmax(np.asarray(teacher_logits, dtype=np.float64))
    return float(-(q * log_softmax(gate_forward(hidden, gate))).sum(axis=1).mean())


def distill_grads(hidden, teacher_logits, gate: LookaheadGate):
    """Loss and gradients w.r.t. (W1, W2); the prior gets no gradient."""
    h = np.asarray(hidden, dtype=np.float64)
    n = h.shape[0]
    z = h @ gate.res_w1.T
    s = silu(z)
    logits = h @ gate.prior_w.T + gate.prior_b + s @ gate.res_w2.T
    q = softmax(np.asarray(teacher_logits, dtype=np.float64))
    loss = float(-(q * log_softmax(logits)).sum(axis=1).mean())
    dl = (softmax(logits) - q) / n
    g_w2 = dl.T @ s
    dz = (dl @ gate.res_w2) * _silu_grad(z)
    g_w1 = dz.T @ h
    return loss, g_w1, g_w2


class DivergenceError(RuntimeError):
    pass


def distill_step(hidden, teacher_logits, gate: LookaheadGate, lr: float) -> tuple[LookaheadGate, float]:
    """One full-batch gradient step on the residual; returns (new gate, pre-step loss)."""
    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        loss, g1, g2 = distill_grads(hidden, teacher_logits, gate)
    if not math.isfinite(loss) or not (np.isfinite(g1).all() and np.isfinite(g2).all()):
        raise DivergenceError(f"non-finite loss/gradient (loss={loss}, lr={lr}, "
                              f"|W1|={np.abs(gate.res_w1).max():.3g}, |W2|={np.abs(gate.res_w2).max():.3g})")
    with np.errstate(over="ignore", invalid="ignore"):
        new = replace(gate, res_w1=gate.res_w1 - lr * g1, res_w2=gate.res_w2 - lr * g2)
    return new, loss


def predict_topk(logits, k: int) -> np.ndarray:
    """Indices of the k largest logits per row, ordered by score, ties to lower id."""
    x = np.asarray(logits, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if k > x.shape[1]:
        raise ValueError("k exceeds number of experts")
    idx = np.argsort(-x, axis=1, kind="stable")[:, :k]
    return idx[0] if squeeze else idx


# -- fidelity ------------------------------------------------------------------

def _as_ranked(x) -> np.ndarray:
    if isinstance(x, SourceRouting):
        if x.token_experts is None:
            raise ValueError("routing carries no per-token expert lists")
        return np.concatenate([t for t in x.token_experts if t.size], axis=0)
    return np.asarray(x, dtype=np.int64)


def fidelity_metrics(predicted, true, k: int) -> tuple[float, float, float]:
    """(top-k accuracy, top-half-k hit rate, 2x top-k recall).

    ``predicted`` and ``true`` are per-token expert lists ordered by score
    (or SourceRoutings carrying them). Predicted rows may hold up to 2k ids;
    extra columns feed the 2x recall only.
    """
    pred = _as_ranked(predicted)
    tru = _as_ranked(true)[:, :k]
    if pred.shape[0] != tru.shape[0]:
        raise ValueError("predicted and true cover different token counts")
    half = math.ceil(k / 2)
    pk = pred[:, :k]
    p2k = pred[:, : 2 * k]
    in_k = (tru[:, :, None] == pk[:, None, :]).any(axis=2)
    in_2k = (tru[:, :, None] == p2k[:, None, :]).any(axis=2)
    return float(in_k.mean()), float(in_k[:, :half].mean()), float(in_2k.mean())


# -- noisy oracle --------------------------------------------------------------

@dataclass(frozen=True)
class NoisyOracleConfig:
    topk_accuracy: float = 0.9
    top_half_k_hit: Optional[float] = None
    seed: int = 0
    substitution: str = "uniform"   # "uniform" | "popularity"

    def violations(self) -> list[str]:
        out = []
        if not 0.0 <= self.topk_accuracy <= 1.0:
            out.append("noisy oracle: topk_accuracy outside [0, 1]")
        if self.top_half_k_hit is not None and not 0.0 <= self.top_half_k_hit <= 1.0:
            out.append("noisy oracle: top_half_k_hit outside [0, 1]")
        if self.substitution not in ("uniform", "popularity"):
            out.append(f"noisy oracle: unknown substitution {self.substitution!r}")
        return out


def _keep_probs(cfg: NoisyOracleConfig, k: int) -> np.ndarray:
    half = math.ceil(k / 2)
    if cfg.top_half_k_hit is None or half == k:
        return np.full(k, cfg.topk_accuracy)
    rest = (k * cfg.topk_accuracy - half * cfg.top_half_k_hit) / (k - half)
    return np.array([cfg.top_half_k_hit] * half + [min(1.0, max(0.0, rest))] * (k - half))


def noisy_oracle_predict(ground_truth: SourceRouting, cfg: NoisyOracleConfig, layer: int = 0,
                         step: int = 0) -> SourceRouting:
    """Perturb each token's expert list: keep slot i with its keep probability,
    refill dropped slots from experts not already kept."""
    problems = cfg.violations()
    if problems:
        raise ValueError("; ".join(problems))
    if ground_truth.token_experts is None:
        raise ValueError("noisy oracle needs per-token expert lists")
    E = ground_truth.num_experts
    if cfg.substitution == "popularity":
        pop = ground_truth.expert_loads.astype(np.float64) + 1.0
    else:
        pop = np.ones(E)
    out = []
    for r, toks in enumerate(ground_truth.token_experts):
        if toks.size == 0:
            out.append(toks)
            continue
        n, k = toks.shape
        rng = rng_for(cfg.seed, "noisy-oracle", step, layer, r)
        keep = rng.random((n, k)) < _keep_probs(cfg, k)[None, :]
        if keep.all():
            out.append(toks.copy())
            continue
        # exponential-race draw over experts; kept experts are excluded
        with np.errstate(divide="ignore"):
            keys = rng.standard_exponential(size=(n, E)) / pop[None, :]
        rows = np.repeat(np.arange(n), k)
        kept_ids = np.where(keep, toks, -1).ravel()
        mask = kept_ids >= 0
        keys[rows[mask], kept_ids[mask]] = np.inf
        fill = np.argsort(keys, axis=1, kind="stable")[:, :k]
        pred = toks.copy()
        need = ~keep
        # j-th dropped slot of a row takes the row's j-th fresh draw
        rank_in_row = np.cumsum(need, axis=1) - 1
        pred[need] = fill[np.nonzero(need)[0], rank_in_row[need]]
        out.append(pred)
    return SourceRouting(token_experts=out, num_experts=E, declared_batch=ground_truth.declared_batch)


# -- synthetic distillation task ----------------------------------------------

@dataclass(frozen=True)
class DriftTask:
    """Teacher router on layer-L states derived from layer-(L-1) states.

    h_L = h_{L-1} + drift * U silu(V h_{L-1}) + noise * eps. The systematic
    part is representable by the residual MLP; ``noise`` bounds accuracy.
    """

    dim: int = 64
    num_experts: int = 32
    top_k: int = 4
    drift_width: int = 8
    drift: float = 0.7
    noise: float = 0.1
    router_scale: float = 3.0
    seed: int = 0

    def teacher(self):
        rng = rng_for(self.seed, "teacher")
        w = rng.normal(0.0, self.router_scale / math.sqrt(self.dim), size=(self.num_experts, self.dim))
        b = rng.normal(0.0, 0.1, size=self.num_experts)
        u = rng.normal(0.0, 1.0 / math.sqrt(self.drift_width), size=(self.dim, self.drift_width))
        v = rng.normal(0.0, 1.0 / math.sqrt(self.dim), size=(self.drift_width, self.dim))
        return w, b, u, v

    def sample(self, n: int, purpose: str = "train"):
        """(h_{L-1}, teacher logits on h_L) for n tokens."""
        w, b, u, v = self.teacher()
        rng = rng_for(self.seed, "samples", purpose, n)
        h_prev = rng.normal(size=(n, self.dim))
        h_next = h_prev + self.drift * silu(h_prev @ v.T) @ u.T + self.noise * rng.normal(size=(n, self.dim))
        return h_prev, h_next @ w.T + b


@dataclass(frozen=True)
class TrainConfig:
    task: DriftTask = DriftTask()
    hidden: Optional[int] = None
    lr: float = 2.0
    epochs: int = 8
    steps_per_epoch: int = 50
    train_tokens: int = 4096
    eval_tokens: int = 4096
    seed: int = 0


def evaluate_gate(gate: LookaheadGate, hidden, teacher_logits, k: int) -> tuple[float, float, float]:
    pred = predict_topk(gate_forward(hidden, gate), 2 * k)
    true = predict_topk(teacher_logits, k)
    return fidelity_metrics(pred, true, k)


def train_gate(cfg: TrainConfig, log=None):
    """Distill a gate on the drift task. Returns (gate, per-epoch metric rows).

    Row 0 is the untrained prior; each later row follows one epoch.
    """
    task = cfg.task
    w, b, _, _ = task.teacher()
    gate = LookaheadGate.from_router(w, b, hidden=cfg.hidden or max(1, task.dim // 4), seed=cfg.seed)
    h_tr, t_tr = task.sample(cfg.train_tokens, "train")
    h_ev, t_ev = task.sample(cfg.eval_tokens, "eval")
    rows = []

    def record(epoch, loss):
        acc, hit, rec = evaluate_gate(gate, h_ev, t_ev, task.top_k)
        row = {"epoch": epoch, "loss": loss, "topk_acc": acc, "top_half_k_hit": hit, "twice_topk_recall": rec}
        rows.append(row)
        if log:
            log(row)

    record(0, distill_loss(h_tr, t_tr, gate))
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(cfg.steps_per_epoch):
            gate, _ = distill_step(h_tr, t_tr, gate, cfg.lr)
        record(epoch, distill_loss(h_tr, t_tr, gate))
    return gate, rows
