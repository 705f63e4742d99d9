"""A single routed MoE layer with affine experts and a linear classifier head.

The forward pass keeps every intermediate the hand-written backward pass in
:mod:`l2r.calculus` needs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gating import gate_weights, softmax_temp, top_k_batch
from .losses import BatchRoutingStats, LossBreakdown, LossWeights, combine, cross_entropy, load_balance_loss, z_loss
from .numeric import Rng
from .routing import (
    RMS_EPS,
    NormStyle,
    RouterConfig,
    RouterState,
    ScoreMode,
    logsumexp,
    phi,
    psi,
    query_norm_hat,
)


@dataclass
class ToyMoEModel:
    cfg: RouterConfig
    n_classes: int
    router: RouterState
    expert_a: np.ndarray  # (N, d, d)
    expert_b: np.ndarray  # (N, d)
    head_w: np.ndarray  # (d, C)
    head_b: np.ndarray  # (C,)

    @classmethod
    def initialize(cls, cfg: RouterConfig, n_classes: int, rng: Rng) -> "ToyMoEModel":
        d, n = cfg.d, cfg.n_experts
        return cls(
            cfg=cfg,
            n_classes=n_classes,
            router=RouterState.initialize(cfg, rng.split("router")),
            expert_a=np.zeros((n, d, d)),
            expert_b=np.zeros((n, d)),
            head_w=np.zeros((d, n_classes)),
            head_b=np.zeros(n_classes),
        )

    def copy(self) -> "ToyMoEModel":
        return replace(
            self,
            router=self.router.copy(),
            expert_a=self.expert_a.copy(),
            expert_b=self.expert_b.copy(),
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by group name; the arrays are live views."""
        out = {}
        r = self.router
        if r.linear is not None:
            out["w_g"] = r.linear.w_g
        if r.projection is not None:
            out["w_q"] = r.projection.w_q
            out["rms_gain"] = r.projection.rms_gain
        if r.anchors is not None:
            out["anchors"] = r.anchors.anchors
        out["expert_a"] = self.expert_a
        out["expert_b"] = self.expert_b
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        if self.cfg.norm_style is not NormStyle.RMSNORM_INPUT or self.cfg.mode is ScoreMode.LINEAR:
            out.pop("rms_gain", None)
        return out


@dataclass
class ForwardCache:
    x: np.ndarray
    labels: np.ndarray
    logits: np.ndarray  # (T, N) expert logits
    scores: np.ndarray  # (T, N)
    selected: np.ndarray  # (T, k)
    gates: np.ndarray  # (T, k)
    expert_out: np.ndarray  # (T, k, d), E_i(x_t) for each selected slot
    y: np.ndarray  # (T, d)
    class_logits: np.ndarray  # (T, C)
    counts: np.ndarray  # (N,) top-k memberships
    loss: LossBreakdown
    # low-rank path only
    xn: np.ndarray | None = None
    rms: np.ndarray | None = None
    q: np.ndarray | None = None
    rho: np.ndarray | None = None
    norm_hat: np.ndarray | None = None
    d_norm_hat: float = 1.0
    cos: np.ndarray | None = None  # (T, N, H)
    anchor_logits: np.ndarray | None = None  # (T, N, H)
    pool_weights: np.ndarray | None = None  # (T, N, H)


def router_logits(model: ToyMoEModel, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
    cfg = model.cfg
    state = model.router
    if cfg.mode is ScoreMode.LINEAR:
        return x @ state.linear.w_g
    proj = state.projection
    if cfg.norm_style is NormStyle.RMSNORM_INPUT:
        rms = np.sqrt(np.mean(x * x, axis=-1) + RMS_EPS)
        xn = x * proj.rms_gain / rms[:, None]
    else:
        rms = None
        xn = x
    q = xn @ proj.w_q
    norm_hat, slope = query_norm_hat(q, state, cfg)
    rho = np.linalg.norm(q, axis=-1)
    k = state.anchors.anchors
    kappa = np.linalg.norm(k, axis=-1)
    denom = np.maximum(rho, cfg.eps_q)[:, None, None] * np.maximum(kappa, cfg.eps_k)[None]
    dots = np.einsum("tr,nhr->tnh", q, k)
    cos = dots / denom
    if cfg.mode is ScoreMode.L2R_SIPS:
        per_anchor = phi(norm_hat, cfg.gamma, cfg.beta)[:, None, None] * psi(kappa, cfg.p)[None] * cos
    elif cfg.mode is ScoreMode.L2R_DOT:
        per_anchor = dots
    else:
        per_anchor = cos
    z = logsumexp(per_anchor, axis=-1)
    if cache is not None:
        cache.update(xn=xn, rms=rms, q=q, rho=rho, norm_hat=norm_hat, d_norm_hat=slope, cos=cos,
                     anchor_logits=per_anchor, pool_weights=np.exp(per_anchor - z[..., None]))
    return z


def forward(model: ToyMoEModel, x: np.ndarray, labels: np.ndarray, weights: LossWeights,
            fixed_selection: np.ndarray | None = None) -> ForwardCache:
    """Full forward pass and loss on a token batch.

    ``fixed_selection`` pins the top-k sets so finite differences see the
    same piecewise-smooth branch the analytic gradient differentiates.
    """
    cfg = model.cfg
    x = np.asarray(x, dtype=np.float64)
    extra: dict = {}
    logits = router_logits(model, x, extra)
    scores = softmax_temp(logits, cfg.tau)
    selected = top_k_batch(scores, cfg.top_k) if fixed_selection is None else fixed_selection
    gates = gate_weights(scores, selected, cfg.renormalize_gates)

    t = x.shape[0]
    expert_out = np.zeros((t, cfg.top_k, cfg.d))
    for i in range(cfg.n_experts):
        rows, slots = np.nonzero(selected == i)
        if rows.size:
            expert_out[rows, slots] = x[rows] @ model.expert_a[i] + model.expert_b[i]
    y = x + np.einsum("tk,tkd->td", gates, expert_out)
    class_logits = y @ model.head_w + model.head_b

    stats = BatchRoutingStats.from_batch(logits, scores, selected)
    task = cross_entropy(class_logits, labels)
    bal = load_balance_loss(stats, cfg.n_experts)
    zl = z_loss(logits)
    loss = combine(task, bal, zl, weights)
    return ForwardCache(x=x, labels=np.asarray(labels), logits=logits, scores=scores, selected=selected,
                        gates=gates, expert_out=expert_out, y=y, class_logits=class_logits,
                        counts=stats.f * t, loss=loss, **extra)


def loss_value(model: ToyMoEModel, x, labels, weights: LossWeights, fixed_selection=None) -> float:
    return forward(model, x, labels, weights, fixed_selection).loss.total
