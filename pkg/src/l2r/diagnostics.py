"""Routing-geometry measurements: angular concentration, fixed-anchor score
landscapes, expert-usage statistics and PCA exports."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gating import RoutingDecision
from .numeric import Rng, pca2
from .routing import RouterConfig, ScoreMode, cosine_logit, dot_logit, psi, sips_logit

DEFAULT_MAX_PAIRS = 1_000_000
PAIR_CHUNK = 65_536
IMPORTANCE_NOTE = "importance = mean full-softmax probability per expert over tokens, normalized to sum 1"


@dataclass(frozen=True)
class ConcentrationReport:
    variance: float
    n_pairs: int
    dimension: int
    isotropic_reference: float
    n_zero_skipped: int = 0


@dataclass(frozen=True)
class LandscapeGrid:
    anchor: np.ndarray
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    resolution: int
    values: np.ndarray  # (resolution, resolution), [y, x]
    mode: ScoreMode
    beta: float

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.linspace(*self.x_range, self.resolution), np.linspace(*self.y_range, self.resolution))


@dataclass(frozen=True)
class UsageStats:
    top1_freq: np.ndarray
    topk_freq: np.ndarray
    importance: np.ndarray
    n_tokens: int


def pairwise_cosine_variance(vectors, max_pairs: int = DEFAULT_MAX_PAIRS, rng: Rng | None = None) -> ConcentrationReport:
    """Variance of cos(theta) over unordered vector pairs.

    All pairs are used when there are at most ``max_pairs`` of them, otherwise
    ``max_pairs`` distinct-index pairs are drawn uniformly with ``rng``.
    Zero vectors are dropped and counted.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("vectors must be a 2-D array (n, r)")
    norms = np.linalg.norm(v, axis=1)
    keep = norms > 0
    n_zero = int(np.count_nonzero(~keep))
    u = v[keep] / norms[keep, None]
    n = u.shape[0]
    if n < 2:
        raise ValueError("need at least two nonzero vectors")
    total_pairs = n * (n - 1) // 2
    if total_pairs <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        if rng is None:
            raise ValueError("an Rng is required when pairs must be subsampled")
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n - 1, size=max_pairs)
        j = j + (j >= i)
    # chunked so (pairs x r) gathers stay small for large r
    cos = np.concatenate([np.einsum("ij,ij->i", u[i[s:s + PAIR_CHUNK]], u[j[s:s + PAIR_CHUNK]])
                          for s in range(0, i.size, PAIR_CHUNK)])
    dim = v.shape[1]
    ref = 0.5 if dim == 2 else 1.0 / dim
    return ConcentrationReport(float(np.var(cos)), int(cos.size), dim, ref, n_zero)


def score_landscape(anchor, cfg: RouterConfig, x_range=(-3.0, 3.0), y_range=(-3.0, 3.0),
                    resolution: int = 121) -> LandscapeGrid:
    """Logit of every grid query against one fixed 2-D anchor.

    ``norm_hat`` is taken as ``|q|``. LINEAR and L2R_DOT both evaluate the
    plain dot product.
    """
    if cfg.r != 2:
        raise ValueError("score landscapes are defined for a 2-D routing space (r=2)")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    anchor = np.asarray(anchor, dtype=np.float64)
    if anchor.shape != (2,):
        raise ValueError("anchor must be a 2-vector")
    xs = np.linspace(x_range[0], x_range[1], resolution)
    ys = np.linspace(y_range[0], y_range[1], resolution)
    gx, gy = np.meshgrid(xs, ys)  # rows follow y
    q = np.stack([gx, gy], axis=-1)
    if cfg.mode is ScoreMode.L2R_SIPS:
        values = sips_logit(q, anchor, np.linalg.norm(q, axis=-1), cfg)
    elif cfg.mode in (ScoreMode.L2R_COSINE, ScoreMode.XMOE_COSINE):
        values = cosine_logit(q, anchor, cfg)
    else:
        values = dot_logit(q, anchor)
    return LandscapeGrid(anchor, tuple(x_range), tuple(y_range), resolution, values, cfg.mode, cfg.beta)


def sips_landscape_bound(anchor, cfg: RouterConfig) -> float:
    return float(cfg.gamma * (1 + cfg.beta) * abs(psi(np.linalg.norm(anchor), cfg.p)))


def expert_usage(decisions: Sequence[RoutingDecision], n_experts: int, k: int) -> UsageStats:
    if not decisions:
        raise ValueError("need at least one routing decision")
    top1 = np.zeros(n_experts)
    topk = np.zeros(n_experts)
    mass = np.zeros(n_experts)
    for dec in decisions:
        if len(dec.selected) != k:
            raise ValueError(f"decision selects {len(dec.selected)} experts, expected {k}")
        top1[dec.selected[0]] += 1
        topk[list(dec.selected)] += 1
        mass += dec.scores
    t = len(decisions)
    return UsageStats(top1 / t, topk / t, mass / mass.sum(), t)


def usage_from_arrays(scores: np.ndarray, selected: np.ndarray) -> UsageStats:
    """Vectorised :func:`expert_usage` for (T, N) scores and (T, k) selections."""
    t, n = scores.shape
    top1 = np.bincount(selected[:, 0], minlength=n) / t
    topk = np.bincount(selected.ravel(), minlength=n) / t
    mass = scores.sum(axis=0)
    return UsageStats(top1.astype(np.float64), topk.astype(np.float64), mass / mass.sum(), t)


def _entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def usage_entropy(stats: UsageStats) -> tuple[float, float]:
    """Shannon entropies (nats) of top-1 frequency and importance."""
    return _entropy(stats.top1_freq), _entropy(stats.importance)


@dataclass(frozen=True)
class PCAExport:
    columns: tuple[str, ...]
    rows: list[tuple]
    x_degenerate: bool
    q_projected: bool


def export_routing_pca(tokens, queries, decisions: Sequence[RoutingDecision]) -> PCAExport:
    """Rows of (x_pc1, x_pc2, q_1, q_2, top1) ready for plotting.

    Queries already living in R^2 pass through unchanged, otherwise they are
    reduced with :func:`pca2` like the tokens.
    """
    x = np.asarray(tokens, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    if not (x.shape[0] == q.shape[0] == len(decisions)):
        raise ValueError(f"length mismatch: {x.shape[0]} tokens, {q.shape[0]} queries, {len(decisions)} decisions")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        px = pca2(x)
    if q.shape[1] == 2:
        q2, projected = q, False
    else:
        q2, projected = pca2(q).projection, True
    rows = [
        (float(px.projection[t, 0]), float(px.projection[t, 1]), float(q2[t, 0]), float(q2[t, 1]),
         int(decisions[t].selected[0]))
        for t in range(x.shape[0])
    ]
    return PCAExport(("x_pc1", "x_pc2", "q_1", "q_2", "top1_expert"), rows, px.degenerate, projected)
