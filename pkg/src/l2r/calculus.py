"""Analytic gradients of the routing scores, finite-difference checks and
gradient-norm / Lipschitz bounds for saturated inner-product scoring.

Single-pair gradient routines broadcast over leading axes: ``q`` and ``k``
may be (..., r) arrays and the returned gradients keep that shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossWeights
from .numeric import Rng, sample_unit_sphere
from .routing import NormStyle, RouterConfig, ScoreMode, cosine_logit, dot_logit, logsumexp, phi, psi, sips_logit
from .toy_model import ForwardCache, ToyMoEModel, forward

FD_STEP = 1e-6


@dataclass(frozen=True)
class GradPair:
    grad_q: np.ndarray
    grad_k: np.ndarray


@dataclass(frozen=True)
class LipschitzDomain:
    rho_min: float
    rho_max: float
    kappa_min: float
    kappa_max: float
    l_norm: float = 1.0

    def __post_init__(self):
        if not 0 < self.rho_min <= self.rho_max:
            raise ValueError("need 0 < rho_min <= rho_max")
        if not 0 < self.kappa_min <= self.kappa_max:
            raise ValueError("need 0 < kappa_min <= kappa_max")
        if self.l_norm < 0:
            raise ValueError("l_norm must be non-negative")


@dataclass(frozen=True)
class BoundReport:
    lip_q: float
    lip_k: float
    samples_checked: int = 0
    max_observed_grad_q: float = 0.0
    max_observed_grad_k: float = 0.0
    violations: int = 0
    mode: str = ScoreMode.L2R_SIPS.value
    l_norm: float = 1.0


def _require_floors(q, k, eps_q: float, eps_k: float):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    rho = np.linalg.norm(q, axis=-1)
    kappa = np.linalg.norm(k, axis=-1)
    if np.any(rho < eps_q) or np.any(kappa < eps_k):
        raise ValueError("query/anchor norm below its floor; clamp before differentiating")
    return q, k, rho, kappa


def grad_cosine(q, k, eps_q: float = 1e-6, eps_k: float = 1e-6) -> GradPair:
    """Projected gradients ``(I - uu^T) v / rho`` and ``(I - vv^T) u / kappa``."""
    q, k, rho, kappa = _require_floors(q, k, eps_q, eps_k)
    u = q / rho[..., None]
    v = k / kappa[..., None]
    c = np.sum(u * v, axis=-1, keepdims=True)
    return GradPair((v - c * u) / rho[..., None], (u - c * v) / kappa[..., None])


def grad_dot(q, k) -> GradPair:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    return GradPair(np.broadcast_to(k, np.broadcast_shapes(q.shape, k.shape)).copy(),
                    np.broadcast_to(q, np.broadcast_shapes(q.shape, k.shape)).copy())


def grad_sips(q, k, norm_hat, d_normhat_d_rho, cfg: RouterConfig) -> GradPair:
    """Gradients of ``phi(norm_hat) psi(kappa) c`` with respect to q and k.

    ``d_normhat_d_rho`` is the slope of the map from ``|q|`` to ``norm_hat``
    (1 when ``norm_hat = |q|``).
    """
    q, k, rho, kappa = _require_floors(q, k, cfg.eps_q, cfg.eps_k)
    u = q / rho[..., None]
    v = k / kappa[..., None]
    c = np.sum(u * v, axis=-1)
    gc = grad_cosine(q, k, cfg.eps_q, cfg.eps_k)
    norm_hat = np.asarray(norm_hat, dtype=np.float64)
    ph = phi(norm_hat, cfg.gamma, cfg.beta)
    dph = cfg.gamma * cfg.beta * (1.0 / np.cosh(norm_hat)) ** 2 * d_normhat_d_rho
    ps = psi(kappa, cfg.p)
    dps = 1.0 / cfg.p
    grad_q = ps[..., None] * (dph[..., None] * c[..., None] * u + ph[..., None] * gc.grad_q)
    grad_k = ph[..., None] * (dps * c[..., None] * v + ps[..., None] * gc.grad_k)
    return GradPair(grad_q, grad_k)


def grad_pair(q, k, norm_hat, d_normhat_d_rho, cfg: RouterConfig) -> GradPair:
    """Per-anchor score gradient under ``cfg.mode``."""
    if cfg.mode is ScoreMode.L2R_SIPS:
        return grad_sips(q, k, norm_hat, d_normhat_d_rho, cfg)
    if cfg.mode in (ScoreMode.L2R_COSINE, ScoreMode.XMOE_COSINE):
        return grad_cosine(q, k, cfg.eps_q, cfg.eps_k)
    if cfg.mode is ScoreMode.L2R_DOT:
        return grad_dot(q, k)
    raise ValueError("linear mode has no query/anchor pair")


def grad_multi_anchor(q, anchors, norm_hat, d_normhat_d_rho, cfg: RouterConfig):
    """Gradient of the LSE-pooled expert logit.

    ``q`` is (..., r), ``anchors`` is (..., H, r). Returns ``(grad_q, grad_anchors)``;
    the pooled gradient is the softmax-over-anchors mix of per-anchor gradients.
    """
    q = np.asarray(q, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    nh = np.asarray(norm_hat, dtype=np.float64)[..., None]
    per = pair_score(q[..., None, :], anchors, nh, cfg)
    w = np.exp(per - logsumexp(per, axis=-1)[..., None])
    g = grad_pair(np.broadcast_to(q[..., None, :], anchors.shape), anchors, np.broadcast_to(nh, per.shape),
                  d_normhat_d_rho, cfg)
    return np.sum(w[..., None] * g.grad_q, axis=-2), w[..., None] * g.grad_k


def pair_score(q, k, norm_hat, cfg: RouterConfig):
    if cfg.mode is ScoreMode.L2R_SIPS:
        return sips_logit(q, k, norm_hat, cfg)
    if cfg.mode in (ScoreMode.L2R_COSINE, ScoreMode.XMOE_COSINE):
        return cosine_logit(q, k, cfg)
    if cfg.mode is ScoreMode.L2R_DOT:
        return dot_logit(q, k)
    raise ValueError("linear mode has no query/anchor pair")


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def central_difference(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of a batched scalar function.

    ``f`` maps an (n, m) array to (n,) values; the result is (n, m).
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for j in range(x.shape[-1]):
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h
        xm[..., j] -= h
        grad[..., j] = (f(xp) - f(xm)) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Row-wise ``|a - n| / max(|a|, |n|, floor)`` using Euclidean norms over the last axis."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.linalg.norm(a - n, axis=-1)
    scale = np.maximum(np.maximum(np.linalg.norm(a, axis=-1), np.linalg.norm(n, axis=-1)), floor)
    return diff / scale


def _random_vectors(rng: Rng, n: int, r: int, lo: float, hi: float) -> np.ndarray:
    return sample_unit_sphere(rng, r, n) * rng.uniform(lo, hi, size=(n, 1))


def check_pair_gradients(cfg: RouterConfig, n_instances: int, rng: Rng, norm_range=(0.1, 10.0),
                         h: float = FD_STEP) -> float:
    """Max relative error of the single-anchor analytic gradient (norm_hat = |q|)."""
    q = _random_vectors(rng.split("q"), n_instances, cfg.r, *norm_range)
    k = _random_vectors(rng.split("k"), n_instances, cfg.r, *norm_range)

    def score(qq, kk):
        return pair_score(qq, kk, np.linalg.norm(qq, axis=-1), cfg)

    g = grad_pair(q, k, np.linalg.norm(q, axis=-1), 1.0, cfg)
    num_q = central_difference(lambda qq: score(qq, k), q, h)
    num_k = central_difference(lambda kk: score(q, kk), k, h)
    return float(max(relative_error(g.grad_q, num_q).max(), relative_error(g.grad_k, num_k).max()))


def check_multi_anchor_gradients(cfg: RouterConfig, n_instances: int, rng: Rng, norm_range=(0.1, 10.0),
                                 h: float = FD_STEP) -> float:
    """Max relative error of the LSE-pooled gradient over ``cfg.n_anchors`` anchors."""
    big_h = cfg.n_anchors
    q = _random_vectors(rng.split("q"), n_instances, cfg.r, *norm_range)
    k = _random_vectors(rng.split("k"), n_instances * big_h, cfg.r, *norm_range).reshape(n_instances, big_h, cfg.r)

    def pooled(qq, kk):
        nh = np.linalg.norm(qq, axis=-1)[:, None]
        return logsumexp(pair_score(qq[:, None, :], kk, nh, cfg), axis=-1)

    gq, gk = grad_multi_anchor(q, k, np.linalg.norm(q, axis=-1), 1.0, cfg)
    num_q = central_difference(lambda qq: pooled(qq, k), q, h)
    flat_k = k.reshape(n_instances, -1)
    num_k = central_difference(lambda kk: pooled(q, kk.reshape(k.shape)), flat_k, h)
    err_q = relative_error(gq, num_q).max()
    err_k = relative_error(gk.reshape(n_instances, -1), num_k).max()
    return float(max(err_q, err_k))


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------


def grad_bound_radial(rho, kappa, cfg: RouterConfig, l_norm: float = 1.0, norm_hat=None):
    """Pointwise bounds on ``|grad_q z|`` and ``|grad_k z|`` for SIPS.

    ``norm_hat`` defaults to ``rho`` (identity normalisation) and ``l_norm``
    is the slope of the normalisation map.
    """
    rho = np.asarray(rho, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    nh = rho if norm_hat is None else np.asarray(norm_hat, dtype=np.float64)
    ph = phi(nh, cfg.gamma, cfg.beta)
    dph = np.abs(cfg.gamma * cfg.beta * (1.0 / np.cosh(nh)) ** 2 * l_norm)
    ps = psi(kappa, cfg.p)
    bound_q = np.abs(ps) * (dph + ph / rho)
    bound_k = ph * (1.0 / cfg.p + np.abs(ps) / kappa)
    return bound_q, bound_k


def lipschitz_constants(domain: LipschitzDomain, cfg: RouterConfig) -> BoundReport:
    phi_max = cfg.gamma * (1.0 + cfg.beta)
    l_phi = cfg.gamma * cfg.beta * domain.l_norm
    psi_max = 1.0 + (domain.kappa_max - 1.0) / cfg.p
    l_psi = 1.0 / cfg.p
    lip_q = psi_max * (l_phi + phi_max / domain.rho_min)
    lip_k = phi_max * (l_psi + psi_max / domain.kappa_min)
    return BoundReport(lip_q=lip_q, lip_k=lip_k, l_norm=domain.l_norm)


def domain_for(cfg: RouterConfig, rho_max: float, kappa_max: float, standardizer=None) -> LipschitzDomain:
    """Domain with the config's floors as lower ends; ``l_norm`` follows the norm style."""
    l_norm = 1.0
    if cfg.norm_style is NormStyle.RUNNING_SCALAR_NORM and standardizer is not None:
        l_norm = standardizer.slope()
    return LipschitzDomain(cfg.eps_q, rho_max, cfg.eps_k, kappa_max, l_norm)


def verify_bounds(domain: LipschitzDomain, cfg: RouterConfig, n_samples: int, rng: Rng,
                  mode: ScoreMode = ScoreMode.L2R_SIPS, chunk: int = 100_000) -> BoundReport:
    """Sample (q, k) over the domain and count bound violations.

    SIPS samples are checked against the pointwise bounds and the closed-form
    constants. Dot-product samples are checked against their own exact
    suprema ``kappa_max`` and ``rho_max``; they exist to show unbounded growth.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mode = ScoreMode.parse(mode)
    if mode is ScoreMode.L2R_SIPS:
        consts = lipschitz_constants(domain, cfg)
        lip_q, lip_k = consts.lip_q, consts.lip_k
    elif mode is ScoreMode.L2R_DOT:
        lip_q, lip_k = domain.kappa_max, domain.rho_max
    else:
        raise ValueError("verify_bounds supports l2r_sips and l2r_dot")
    tol = 1e-12
    max_q = max_k = 0.0
    violations = 0
    done = 0
    rng_q, rng_k = rng.split("q"), rng.split("k")
    while done < n_samples:
        m = min(chunk, n_samples - done)
        rho = rng_q.uniform(domain.rho_min, domain.rho_max, size=m)
        kappa = rng_k.uniform(domain.kappa_min, domain.kappa_max, size=m)
        q = sample_unit_sphere(rng_q, cfg.r, m) * rho[:, None]
        k = sample_unit_sphere(rng_k, cfg.r, m) * kappa[:, None]
        rho = np.linalg.norm(q, axis=-1)
        kappa = np.linalg.norm(k, axis=-1)
        if mode is ScoreMode.L2R_SIPS:
            g = grad_sips(q, k, rho, domain.l_norm, cfg)
            bq, bk = grad_bound_radial(rho, kappa, cfg, l_norm=domain.l_norm)
        else:
            g = grad_dot(q, k)
            bq, bk = kappa, rho
        nq = np.linalg.norm(g.grad_q, axis=-1)
        nk = np.linalg.norm(g.grad_k, axis=-1)
        bad = (nq > bq * (1 + tol) + tol) | (nk > bk * (1 + tol) + tol)
        bad |= (bq > lip_q * (1 + tol) + tol) | (bk > lip_k * (1 + tol) + tol)
        violations += int(np.count_nonzero(bad))
        max_q = max(max_q, float(nq.max()))
        max_k = max(max_k, float(nk.max()))
        done += m
    return BoundReport(lip_q, lip_k, done, max_q, max_k, violations, mode.value, domain.l_norm)


# ---------------------------------------------------------------------------
# toy model backward
# ---------------------------------------------------------------------------


def backward_toy_model(x: np.ndarray, labels: np.ndarray, model: ToyMoEModel, weights: LossWeights,
                       cache: ForwardCache | None = None) -> tuple[ForwardCache, dict[str, np.ndarray]]:
    """Gradients of the total loss for every parameter group of ``model``.

    The top-k sets found by the forward pass are held fixed; gradients reach
    the router through the selected gate weights, the load-balance term and
    the z-loss. Running norm statistics are treated as constants.
    """
    cfg = model.cfg
    if cache is None:
        cache = forward(model, x, labels, weights)
    c = cache
    t, n, kk, d = c.x.shape[0], cfg.n_experts, cfg.top_k, cfg.d
    grads: dict[str, np.ndarray] = {}

    # classifier head
    p_cls = np.exp(c.class_logits - logsumexp(c.class_logits, axis=-1)[:, None])
    p_cls[np.arange(t), c.labels] -= 1.0
    d_cls = p_cls / t
    grads["head_w"] = c.y.T @ d_cls
    grads["head_b"] = d_cls.sum(axis=0)
    d_y = d_cls @ model.head_w.T

    # experts, only through the selected slots
    d_gates = np.einsum("td,tkd->tk", d_y, c.expert_out)
    ga = np.zeros_like(model.expert_a)
    gb = np.zeros_like(model.expert_b)
    for i in range(n):
        rows, slots = np.nonzero(c.selected == i)
        if rows.size:
            wdy = c.gates[rows, slots][:, None] * d_y[rows]
            ga[i] = c.x[rows].T @ wdy
            gb[i] = wdy.sum(axis=0)
    grads["expert_a"] = ga
    grads["expert_b"] = gb

    # gate weights -> full softmax scores
    d_scores = np.zeros((t, n))
    if cfg.renormalize_gates:
        sel_scores = np.take_along_axis(c.scores, c.selected, axis=-1)
        total = sel_scores.sum(axis=-1, keepdims=True)
        d_sel = (d_gates - np.sum(d_gates * c.gates, axis=-1, keepdims=True)) / total
    else:
        d_sel = d_gates
    np.add.at(d_scores, (np.repeat(np.arange(t), kk), c.selected.ravel()), d_sel.ravel())
    # load balance: N * sum_i mean_t(s_ti) * f_i, with f held fixed
    d_scores += weights.lambda_bal * n * (c.counts / t)[None, :] / t

    d_logits = c.scores * (d_scores - np.sum(d_scores * c.scores, axis=-1, keepdims=True)) / cfg.tau
    lse = logsumexp(c.logits, axis=-1)
    soft = np.exp(c.logits - lse[:, None])
    d_logits += weights.lambda_z * 2.0 * lse[:, None] * soft / t

    if cfg.mode is ScoreMode.LINEAR:
        grads["w_g"] = c.x.T @ d_logits
        return cache, grads

    anchors = model.router.anchors.anchors
    d_per = d_logits[:, :, None] * c.pool_weights  # (T, N, H)
    rho_c = np.maximum(c.rho, cfg.eps_q)
    kappa = np.linalg.norm(anchors, axis=-1)
    kappa_c = np.maximum(kappa, cfg.eps_k)
    q_active = (c.rho > cfg.eps_q).astype(np.float64)
    k_active = (kappa > cfg.eps_k).astype(np.float64)
    safe_rho = np.where(c.rho > 0, c.rho, 1.0)
    safe_kappa = np.where(kappa > 0, kappa, 1.0)

    if cfg.mode is ScoreMode.L2R_DOT:
        d_q = np.einsum("tnh,nhr->tr", d_per, anchors)
        d_k = np.einsum("tnh,tr->nhr", d_per, c.q)
    else:
        if cfg.mode is ScoreMode.L2R_SIPS:
            ph = phi(c.norm_hat, cfg.gamma, cfg.beta)
            ps = psi(kappa, cfg.p)
            d_cos = d_per * ph[:, None, None] * ps[None]
            d_phi = np.sum(d_per * ps[None] * c.cos, axis=(1, 2))
            d_psi = np.sum(d_per * ph[:, None, None] * c.cos, axis=0)
            d_rho = d_phi * cfg.gamma * cfg.beta * (1.0 / np.cosh(c.norm_hat)) ** 2 * c.d_norm_hat
            d_kappa = d_psi / cfg.p
        else:
            d_cos = d_per
            d_rho = np.zeros(t)
            d_kappa = np.zeros_like(kappa)
        inv = 1.0 / (rho_c[:, None, None] * kappa_c[None])
        d_q = np.einsum("tnh,nhr->tr", d_cos * inv, anchors)
        d_q -= (np.sum(d_cos * c.cos, axis=(1, 2)) * q_active / rho_c ** 2)[:, None] * c.q
        d_k = np.einsum("tnh,tr->nhr", d_cos * inv, c.q)
        d_k -= (np.sum(d_cos * c.cos, axis=0) * k_active / kappa_c ** 2)[..., None] * anchors
        d_q += (d_rho / safe_rho)[:, None] * c.q
        d_k += (d_kappa / safe_kappa)[..., None] * anchors

    grads["anchors"] = d_k
    proj = model.router.projection
    grads["w_q"] = c.xn.T @ d_q
    if cfg.norm_style is NormStyle.RMSNORM_INPUT:
        d_xn = d_q @ proj.w_q.T
        grads["rms_gain"] = np.sum(d_xn * c.x / c.rms[:, None], axis=0)
    return cache, grads


def check_toy_model_gradients(model: ToyMoEModel, x: np.ndarray, labels: np.ndarray, weights: LossWeights,
                              h: float = FD_STEP) -> dict[str, tuple[int, float]]:
    """Coordinate-wise central differences against :func:`backward_toy_model`.

    Returns ``{group: (n_coordinates, max_relative_error)}`` where the error
    of a group is ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
    """
    cache, grads = backward_toy_model(x, labels, model, weights)
    fixed = cache.selected
    out = {}
    for name, arr in model.parameters().items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = num.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            fp = forward(model, x, labels, weights, fixed).loss.total
            flat[j] = old - h
            fm = forward(model, x, labels, weights, fixed).loss.total
            flat[j] = old
            num_flat[j] = (fp - fm) / (2 * h)
        a = grads[name]
        scale = max(float(np.abs(a).max()), float(np.abs(num).max()), 1e-8)
        out[name] = (int(flat.size), float(np.abs(a - num).max() / scale))
    return out


# ---------------------------------------------------------------------------
# suite used by the CLI and the acceptance tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckResult:
    target: str
    n_checked: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def random_toy_instance(cfg: RouterConfig, n_classes: int, n_tokens: int, rng: Rng, scale: float = 0.3):
    """A toy model with every parameter group randomised, plus a token batch."""
    model = ToyMoEModel.initialize(cfg, n_classes, rng.split("init"))
    g = rng.split("params")
    for name, arr in model.parameters().items():
        arr[...] = g.normal(size=arr.shape, scale=scale) + (1.0 if name == "rms_gain" else 0.0)
    if model.router.standardizer is not None:
        model.router.standardizer.running_mean = float(g.uniform(0.0, 1.0))
        model.router.standardizer.running_var = float(g.uniform(0.2, 2.0))
    x = g.normal(size=(n_tokens, cfg.d))
    labels = g.integers(0, n_classes, size=n_tokens)
    return model, x, labels


TOY_CHECK_WEIGHTS = LossWeights(0.3, 0.05)


def gradient_check_suite(rng: Rng, n_instances: int = 10_000, r: int = 3, n_anchors: int = 4,
                         norm_range=(0.1, 10.0), h: float = FD_STEP, tol: float = 1e-5,
                         model_instances: int = 30, model_shape=(8, 2, 4, 2, 16),
                         model_tol: float = 1e-4) -> list[GradCheckResult]:
    """Analytic-vs-central-difference errors for every scoring mode and the toy model.

    ``model_shape`` is ``(d, r, N, H, T)``. Toy-model instances cycle through
    all score modes and normalisation styles; ``n_checked`` counts gradient
    coordinates.
    """
    results = []
    for mode in (ScoreMode.L2R_COSINE, ScoreMode.L2R_SIPS, ScoreMode.L2R_DOT):
        cfg = RouterConfig(d=max(r, 1), r=r, n_experts=1, n_anchors=1, top_k=1, mode=mode)
        err = check_pair_gradients(cfg, n_instances, rng.split(f"pair/{mode.value}"), norm_range, h)
        results.append(GradCheckResult(mode.value.removeprefix("l2r_"), n_instances, err, tol))
        cfg_h = cfg.with_(n_anchors=n_anchors)
        err = check_multi_anchor_gradients(cfg_h, n_instances, rng.split(f"multi/{mode.value}"), norm_range, h)
        results.append(GradCheckResult(f"multi_anchor_{mode.value.removeprefix('l2r_')}", n_instances, err, tol))

    d, mr, n, big_h, t = model_shape
    combos = [(m, s) for m in ScoreMode for s in NormStyle]
    worst = 0.0
    checked = 0
    for i in range(model_instances):
        mode, style = combos[i % len(combos)]
        cfg = RouterConfig(d=d, r=mr, n_experts=n, n_anchors=1 if mode is ScoreMode.XMOE_COSINE else big_h,
                           top_k=min(2, n), mode=mode, norm_style=style, renormalize_gates=bool(i % 2))
        model, x, labels = random_toy_instance(cfg, 3, t, rng.split(f"toy/{i}"))
        for n_coords, err in check_toy_model_gradients(model, x, labels, TOY_CHECK_WEIGHTS, h).values():
            worst = max(worst, err)
            checked += n_coords
    results.append(GradCheckResult("toy_model", checked, worst, model_tol))
    return results
