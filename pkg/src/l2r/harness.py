"""Synthetic clustered data and a deterministic SGD loop for the toy MoE model."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .calculus import backward_toy_model
from .diagnostics import ConcentrationReport, UsageStats, pairwise_cosine_variance, usage_entropy, usage_from_arrays
from .losses import LossBreakdown, LossWeights
from .numeric import Rng, sample_unit_sphere
from .routing import RouterConfig, ScoreMode, normalize_input
from .toy_model import ToyMoEModel, forward

DEFAULT_SEED = 2025
CLUSTER_RADIUS = 3.0


@dataclass(frozen=True)
class SyntheticDataset:
    x: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    n_clusters: int
    cluster_means: np.ndarray  # (n_clusters, d)
    noise_sigma: float
    seed: int

    def __len__(self) -> int:
        return self.x.shape[0]


def make_dataset(seed: int, n_clusters: int = 8, d: int = 32, n_per_cluster: int = 128,
                 noise_sigma: float = 0.3) -> SyntheticDataset:
    """Gaussian blobs around means drawn on the radius-3 sphere; label = cluster id."""
    if n_clusters < 2 or d < 2:
        raise ValueError("need n_clusters >= 2 and d >= 2")
    rng = Rng(seed, "dataset")
    means = CLUSTER_RADIUS * sample_unit_sphere(rng.split("means"), d, n_clusters)
    labels = np.repeat(np.arange(n_clusters), n_per_cluster)
    noise = rng.split("noise").normal(size=(labels.size, d), scale=noise_sigma) if noise_sigma > 0 else 0.0
    x = means[labels] + noise
    return SyntheticDataset(x, labels, n_clusters, means, float(noise_sigma), int(seed))


@dataclass(frozen=True)
class DataConfig:
    n_clusters: int = 8
    n_per_cluster: int = 128
    noise_sigma: float = 0.3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.0
    lambda_bal: float = 0.01
    lambda_z: float = 0.001
    snapshot_interval: int = 500
    router_lr_scale: float = 1.0
    anchor_lr_scale: float = 1.0
    expert_lr_scale: float = 1.0
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.snapshot_interval < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and snapshot_interval >= 1 required")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_bal, self.lambda_z)


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: LossBreakdown
    max_router_norm: float


@dataclass
class TrainRun:
    model_cfg: RouterConfig
    train_cfg: TrainConfig
    history: list[StepRecord]
    snapshots: list[tuple[int, UsageStats]]
    initial_eval: LossBreakdown
    final_eval: LossBreakdown
    final_usage: UsageStats
    concentration: ConcentrationReport
    seed: int
    wall_time: float = 0.0
    failed: bool = False
    failure_reason: str = ""
    model: ToyMoEModel | None = field(default=None, repr=False)

    def summary(self) -> dict[str, float]:
        h_top1, h_imp = usage_entropy(self.final_usage)
        return {
            "initial_task_ce": self.initial_eval.task,
            "final_task_ce": self.final_eval.task,
            "initial_bal": self.initial_eval.bal,
            "final_bal": self.final_eval.bal,
            "entropy_top1": h_top1,
            "entropy_importance": h_imp,
            "query_cosine_variance": self.concentration.variance,
        }


_ROUTER_GROUPS = ("w_g", "w_q", "rms_gain")
_EXPERT_GROUPS = ("expert_a", "expert_b")


def _lr_scale(name: str, cfg: TrainConfig) -> float:
    if name in _ROUTER_GROUPS:
        return cfg.router_lr_scale
    if name == "anchors":
        return cfg.router_lr_scale * cfg.anchor_lr_scale
    if name in _EXPERT_GROUPS:
        return cfg.expert_lr_scale
    return 1.0


def max_router_norm(model: ToyMoEModel) -> float:
    r = model.router
    if r.anchors is not None:
        return float(r.anchors.norms.max())
    return float(np.linalg.norm(r.linear.w_g, axis=0).max())


def routing_space(model: ToyMoEModel, x: np.ndarray) -> np.ndarray:
    """The vectors the router matches against anchors: q for low-rank modes, x itself for LINEAR."""
    cfg = model.cfg
    if cfg.mode is ScoreMode.LINEAR:
        return np.asarray(x, dtype=np.float64)
    proj = model.router.projection
    return normalize_input(x, proj, cfg) @ proj.w_q


def evaluate(model: ToyMoEModel, data: SyntheticDataset, weights: LossWeights):
    cache = forward(model, data.x, data.labels, weights)
    return cache.loss, usage_from_arrays(cache.scores, cache.selected)


def train(model_cfg: RouterConfig, train_cfg: TrainConfig, dataset: SyntheticDataset,
          model: ToyMoEModel | None = None) -> TrainRun:
    """Minibatch SGD on the total loss; fully determined by ``train_cfg.seed``."""
    start = time.perf_counter()
    if model_cfg.d != dataset.x.shape[1]:
        raise ValueError(f"router d={model_cfg.d} but dataset has dimension {dataset.x.shape[1]}")
    root = Rng(train_cfg.seed, "harness")
    if model is None:
        model = ToyMoEModel.initialize(model_cfg, dataset.n_clusters, root.split("init"))
    batches = root.split("batches")
    weights = train_cfg.weights
    initial_eval, usage = evaluate(model, dataset, weights)
    snapshots = [(0, usage)]
    history: list[StepRecord] = []
    velocity = {name: np.zeros_like(a) for name, a in model.parameters().items()}
    failed, reason = False, ""
    n = len(dataset)
    bs = min(train_cfg.batch_size, n)

    # non-finite values are detected and reported through the failure flag
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for step in range(1, train_cfg.steps + 1):
            idx = batches.choice(n, bs, replace=False)
            xb, yb = dataset.x[idx], dataset.labels[idx]
            cache, grads = backward_toy_model(xb, yb, model, weights)
            if not math.isfinite(cache.loss.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                failed, reason = True, f"non-finite loss or gradient at step {step}"
                break
            for name, arr in model.parameters().items():
                v = velocity[name]
                v *= train_cfg.momentum
                v += grads[name]
                arr -= train_cfg.lr * _lr_scale(name, train_cfg) * v
            std = model.router.standardizer
            if std is not None:
                std.update(cache.rho)
            norm = max_router_norm(model)
            if not math.isfinite(norm):
                failed, reason = True, f"non-finite router parameters after step {step}"
                break
            history.append(StepRecord(step, cache.loss, norm))
            if step % train_cfg.snapshot_interval == 0 or step == train_cfg.steps:
                snapshots.append((step, evaluate(model, dataset, weights)[1]))

        final_eval, final_usage = evaluate(model, dataset, weights)
        if not math.isfinite(final_eval.total):
            failed, reason = True, reason or "non-finite final evaluation"
        space = routing_space(model, dataset.x)
        if np.all(np.isfinite(space)):
            conc = pairwise_cosine_variance(space, rng=root.split("concentration"))
        else:
            conc = ConcentrationReport(math.nan, 0, space.shape[1], math.nan)
    return TrainRun(model_cfg, train_cfg, history, snapshots, initial_eval, final_eval, final_usage, conc,
                    seed=train_cfg.seed, wall_time=time.perf_counter() - start, failed=failed,
                    failure_reason=reason, model=model)


@dataclass(frozen=True)
class ComparisonRow:
    mode: ScoreMode
    seed: int
    final_task_ce: float
    final_bal: float
    entropy_top1: float
    entropy_importance: float
    query_cosine_variance: float
    failed: bool


@dataclass(frozen=True)
class ComparisonTable:
    rows: list[ComparisonRow]

    METRICS = ("final_task_ce", "final_bal", "entropy_top1", "entropy_importance", "query_cosine_variance")

    def aggregate(self) -> list[dict]:
        """Per-mode mean, min and max of every metric."""
        out = []
        for mode in dict.fromkeys(r.mode for r in self.rows):
            sel = [r for r in self.rows if r.mode is mode]
            agg = {"mode": mode.value, "n_seeds": len(sel)}
            for m in self.METRICS:
                vals = np.array([getattr(r, m) for r in sel])
                agg[f"{m}_mean"] = float(vals.mean())
                agg[f"{m}_min"] = float(vals.min())
                agg[f"{m}_max"] = float(vals.max())
            out.append(agg)
        return out

    def row(self, mode: ScoreMode, seed: int) -> ComparisonRow:
        return next(r for r in self.rows if r.mode is mode and r.seed == seed)


def compare_modes(base_cfg: RouterConfig, modes: Sequence[ScoreMode | str], seeds: Sequence[int],
                  train_cfg: TrainConfig = TrainConfig(), data_cfg: DataConfig = DataConfig()) -> ComparisonTable:
    """Train every (mode, seed) cell; a seed fixes both the dataset and the initialisation."""
    if not modes or not seeds:
        raise ValueError("need at least one mode and one seed")
    rows = []
    for mode in modes:
        mode = ScoreMode.parse(mode)
        cfg = base_cfg.with_(mode=mode, n_anchors=1 if mode is ScoreMode.XMOE_COSINE else base_cfg.n_anchors)
        for seed in seeds:
            data = make_dataset(seed, data_cfg.n_clusters, cfg.d, data_cfg.n_per_cluster, data_cfg.noise_sigma)
            run = train(cfg, replace(train_cfg, seed=seed), data)
            s = run.summary()
            rows.append(ComparisonRow(mode, seed, s["final_task_ce"], s["final_bal"], s["entropy_top1"],
                                      s["entropy_importance"], s["query_cosine_variance"], run.failed))
    return ComparisonTable(rows)
