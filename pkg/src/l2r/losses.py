"""Task cross-entropy plus the load-balance and router z-loss auxiliaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .routing import logsumexp


@dataclass(frozen=True)
class LossWeights:
    lambda_bal: float = 0.01
    lambda_z: float = 0.001

    def __post_init__(self):
        if self.lambda_bal < 0 or self.lambda_z < 0:
            raise ValueError("loss weights must be non-negative")


LLM_PRESET = LossWeights(0.01, 0.001)
# vision runs drop the z-loss
VISION_PRESET = LossWeights(0.01, 0.0)


@dataclass(frozen=True)
class BatchRoutingStats:
    """Batch means of routing probability (``s_bar``) and top-k membership (``f``)."""

    n_tokens: int
    s_bar: np.ndarray
    f: np.ndarray
    logits: np.ndarray

    @classmethod
    def from_batch(cls, logits: np.ndarray, scores: np.ndarray, selected: np.ndarray) -> "BatchRoutingStats":
        logits = np.asarray(logits, dtype=np.float64)
        scores = np.asarray(scores, dtype=np.float64)
        t, n = scores.shape
        counts = np.zeros(n)
        np.add.at(counts, np.asarray(selected).ravel(), 1.0)
        return cls(t, scores.mean(axis=0), counts / t, logits)


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    bal: float
    z: float
    total: float
    lambda_bal: float
    lambda_z: float


def load_balance_loss(stats: BatchRoutingStats, n_experts: int) -> float:
    return float(n_experts * np.sum(stats.s_bar * stats.f))


def z_loss(logits_batch) -> float:
    z = np.atleast_2d(np.asarray(logits_batch, dtype=np.float64))
    if z.shape[0] < 1:
        raise ValueError("z_loss needs at least one token")
    return float(np.mean(logsumexp(z, axis=-1) ** 2))


def task_loss_ce(pred_logits, label: int) -> float:
    pred = np.asarray(pred_logits, dtype=np.float64)
    if pred.ndim != 1 or pred.shape[0] < 2:
        raise ValueError("cross-entropy needs at least two classes")
    if not 0 <= label < pred.shape[0]:
        raise ValueError(f"label {label} out of range for {pred.shape[0]} classes")
    return float(logsumexp(pred) - pred[label])


def cross_entropy(pred_logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a (T, C) batch."""
    pred = np.asarray(pred_logits, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= pred.shape[1]:
        raise ValueError("label out of range")
    return float(np.mean(logsumexp(pred, axis=-1) - pred[np.arange(pred.shape[0]), labels]))


def combine(task: float, bal: float, z: float, weights: LossWeights) -> LossBreakdown:
    total = task + weights.lambda_bal * bal + weights.lambda_z * z
    return LossBreakdown(task, bal, z, total, weights.lambda_bal, weights.lambda_z)


def total_loss(task: float, stats: BatchRoutingStats, logits_batch, lambda_bal: float = 0.01,
               lambda_z: float = 0.001) -> LossBreakdown:
    weights = LossWeights(lambda_bal, lambda_z)
    n = stats.s_bar.shape[0]
    return combine(task, load_balance_loss(stats, n), z_loss(logits_batch), weights)
