"""Temperature softmax, deterministic top-k and the sparse residual MoE mixture."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numeric import as_vector
from .routing import RouterConfig, RouterState, route_logits, route_logits_batch

Expert = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RoutingDecision:
    logits: np.ndarray
    scores: np.ndarray
    selected: tuple[int, ...]
    gate_weights: np.ndarray


def softmax_temp(z, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    z = np.asarray(z, dtype=np.float64) / tau
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def top_k_select(s, k: int) -> list[int]:
    """Indices of the k largest scores, descending; ties go to the smaller index."""
    s = as_vector(s, "scores")
    if not 1 <= k <= s.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {s.shape[0]}]")
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order[:k]]


def top_k_batch(s: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k_select` for a (T, N) score matrix."""
    if not 1 <= k <= s.shape[-1]:
        raise ValueError(f"k={k} must lie in [1, {s.shape[-1]}]")
    return np.argsort(-s, axis=-1, kind="stable")[:, :k]


def gate_weights(scores: np.ndarray, selected: np.ndarray, renormalize: bool = False) -> np.ndarray:
    g = np.take_along_axis(scores, selected, axis=-1) if scores.ndim == 2 else scores[selected]
    if renormalize:
        g = g / np.sum(g, axis=-1, keepdims=True)
    return g


def decide(logits, cfg: RouterConfig) -> RoutingDecision:
    logits = as_vector(logits, "logits")
    scores = softmax_temp(logits, cfg.tau)
    selected = top_k_select(scores, cfg.top_k)
    gates = gate_weights(scores, np.array(selected), cfg.renormalize_gates)
    return RoutingDecision(logits, scores, tuple(selected), gates)


@dataclass
class ExpertBank:
    """N experts sharing input/output dimension, with an evaluation counter."""

    experts: Sequence[Expert]
    evaluations: int = field(default=0, compare=False)

    def __len__(self) -> int:
        return len(self.experts)

    def __call__(self, i: int, x: np.ndarray) -> np.ndarray:
        self.evaluations += 1
        out = np.asarray(self.experts[i](x), dtype=np.float64)
        if out.shape != x.shape:
            raise ValueError(f"expert {i} maps shape {x.shape} to {out.shape}")
        return out

    @classmethod
    def affine(cls, a: np.ndarray, b: np.ndarray) -> "ExpertBank":
        """Experts ``x -> x @ a[i] + b[i]`` from stacked (N, d, d) and (N, d) arrays."""
        return cls([affine_expert(a[i], b[i]) for i in range(a.shape[0])])


def affine_expert(a: np.ndarray, b: np.ndarray) -> Expert:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return lambda x: x @ a + b


def mlp_expert(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray) -> Expert:
    """One-hidden-layer ReLU expert, d -> hidden -> d."""
    return lambda x: np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def moe_forward(x, bank: ExpertBank, decision: RoutingDecision) -> np.ndarray:
    """``x + sum_i s_i E_i(x)`` over the selected experts only."""
    x = as_vector(x, "token")
    y = x.copy()
    for i, w in zip(decision.selected, decision.gate_weights):
        y = y + w * bank(i, x)
    return y


def route_token(x, state: RouterState, bank: ExpertBank, cfg: RouterConfig) -> tuple[RoutingDecision, np.ndarray]:
    if len(bank) != cfg.n_experts:
        raise ValueError(f"bank has {len(bank)} experts, config expects {cfg.n_experts}")
    decision = decide(route_logits(x, state, cfg), cfg)
    return decision, moe_forward(x, bank, decision)


def decide_batch(x, state: RouterState, cfg: RouterConfig) -> list[RoutingDecision]:
    logits = route_logits_batch(x, state, cfg)
    return decisions_from_logits(logits, cfg)


def decisions_from_logits(logits: np.ndarray, cfg: RouterConfig) -> list[RoutingDecision]:
    scores = softmax_temp(logits, cfg.tau)
    selected = top_k_batch(scores, cfg.top_k)
    gates = gate_weights(scores, selected, cfg.renormalize_gates)
    return [
        RoutingDecision(logits[t], scores[t], tuple(int(i) for i in selected[t]), gates[t])
        for t in range(logits.shape[0])
    ]
