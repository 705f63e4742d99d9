"""Router configuration, router state and the five scoring geometries.

Shapes used throughout: a query ``q`` has trailing dimension ``r``; anchors
are stored as an (N, H, r) array; batched routines take a token matrix of
shape (T, d) and return (T, N) expert logits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .numeric import Rng, as_vector, ensure_finite, rmsnorm, sample_unit_sphere

RMS_EPS = 1e-6
STANDARDIZER_EPS = 1e-5


class ScoreMode(str, enum.Enum):
    LINEAR = "linear"
    XMOE_COSINE = "xmoe_cosine"
    L2R_DOT = "l2r_dot"
    L2R_COSINE = "l2r_cosine"
    L2R_SIPS = "l2r_sips"

    @classmethod
    def parse(cls, value: "str | ScoreMode") -> "ScoreMode":
        if isinstance(value, ScoreMode):
            return value
        try:
            return cls(value.strip().lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown score mode {value!r}; expected one of {names}") from None


class NormStyle(str, enum.Enum):
    RMSNORM_INPUT = "rmsnorm_input"
    RUNNING_SCALAR_NORM = "running_scalar_norm"
    NONE = "none"

    @classmethod
    def parse(cls, value: "str | NormStyle") -> "NormStyle":
        if isinstance(value, NormStyle):
            return value
        try:
            return cls(value.strip().lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown norm style {value!r}; expected one of {names}") from None


# key in the flat config file -> RouterConfig attribute
_KV_KEYS = {
    "router.d": "d",
    "router.r": "r",
    "router.n_experts": "n_experts",
    "router.n_anchors": "n_anchors",
    "router.top_k": "top_k",
    "router.tau": "tau",
    "router.eps_q": "eps_q",
    "router.eps_k": "eps_k",
    "router.mode": "mode",
    "router.norm_style": "norm_style",
    "router.renormalize_gates": "renormalize_gates",
    "sips.gamma": "gamma",
    "sips.beta": "beta",
    "sips.p": "p",
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RouterConfig:
    """All routing hyperparameters.

    ``n_experts`` is N, ``n_anchors`` is H (anchors per expert) and ``top_k``
    is k. ``gamma``, ``beta`` and ``p`` parameterise the SIPS magnitude
    transforms; ``eps_q``/``eps_k`` are the norm floors used by every
    cosine computation.
    """

    d: int = 32
    r: int = 2
    n_experts: int = 8
    n_anchors: int = 4
    top_k: int = 2
    gamma: float = 1.0
    beta: float = 1.0
    p: float = 4.0
    tau: float = 1.0
    eps_q: float = 1e-6
    eps_k: float = 1e-6
    mode: ScoreMode = ScoreMode.L2R_SIPS
    norm_style: NormStyle = NormStyle.RMSNORM_INPUT
    renormalize_gates: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", ScoreMode.parse(self.mode))
        object.__setattr__(self, "norm_style", NormStyle.parse(self.norm_style))
        if self.d < 1 or self.r < 1:
            raise ValueError(f"dimensions must be positive (d={self.d}, r={self.r})")
        if self.r > self.d:
            raise ValueError(f"routing rank r={self.r} exceeds backbone dimension d={self.d}")
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if self.n_anchors < 1:
            raise ValueError("n_anchors must be >= 1")
        if self.mode is ScoreMode.XMOE_COSINE and self.n_anchors != 1:
            raise ValueError("xmoe_cosine routing uses a single anchor per expert (n_anchors=1)")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not self.p >= 1:
            raise ValueError("p must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not (self.eps_q > 0 and self.eps_k > 0):
            raise ValueError("norm floors eps_q and eps_k must be > 0")

    def with_(self, **changes) -> "RouterConfig":
        return replace(self, **changes)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for key, attr in _KV_KEYS.items():
            value = getattr(self, attr)
            if isinstance(value, enum.Enum):
                out[key] = value.value
            elif isinstance(value, bool):
                out[key] = "true" if value else "false"
            else:
                out[key] = repr(value)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "RouterConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, text in kv.items():
            if key not in _KV_KEYS:
                raise KeyError(f"unknown router config key {key!r}")
            attr = _KV_KEYS[key]
            kind = kinds[attr]
            try:
                if kind == "int":
                    kwargs[attr] = int(text)
                elif kind == "float":
                    kwargs[attr] = float(text)
                elif kind == "bool":
                    kwargs[attr] = _parse_bool(text)
                else:
                    kwargs[attr] = text.strip()
            except ValueError:
                raise ValueError(f"{key}: expected {kind}, got {text!r}") from None
        return cls(**kwargs)


@dataclass
class LinearRouterWeights:
    w_g: np.ndarray  # (d, N)


@dataclass
class LowRankProjection:
    w_q: np.ndarray  # (d, r)
    rms_gain: np.ndarray  # (d,)


@dataclass
class AnchorSet:
    anchors: np.ndarray  # (N, H, r)

    @classmethod
    def on_unit_sphere(cls, rng: Rng, n_experts: int, n_anchors: int, r: int) -> "AnchorSet":
        flat = sample_unit_sphere(rng, r, n_experts * n_anchors)
        return cls(flat.reshape(n_experts, n_anchors, r))

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.anchors, axis=-1)


@dataclass
class NormStandardizer:
    """Running standardisation of the scalar query norm.

    Stands in for batch normalisation of ``||q||``: at routing time the
    stored statistics are used, so the result does not depend on batch size.
    ``update`` mutates in place and must be driven by a single owner.
    """

    running_mean: float = 0.0
    running_var: float = 1.0
    momentum: float = 0.1
    frozen: bool = False

    def standardize(self, rho):
        return (np.asarray(rho, dtype=np.float64) - self.running_mean) / np.sqrt(self.running_var + STANDARDIZER_EPS)

    def slope(self) -> float:
        """Derivative (and Lipschitz constant) of ``standardize``."""
        return 1.0 / float(np.sqrt(self.running_var + STANDARDIZER_EPS))

    def update(self, rho_batch) -> None:
        if self.frozen:
            return
        rho_batch = np.asarray(rho_batch, dtype=np.float64)
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * float(rho_batch.mean())
        self.running_var = (1 - m) * self.running_var + m * float(rho_batch.var())


@dataclass
class RouterState:
    """Learnable router parameters for one of the score modes.

    LINEAR uses only ``linear``; every other mode uses ``projection`` and
    ``anchors`` (plus ``standardizer`` under the running-norm style).
    """

    linear: LinearRouterWeights | None = None
    projection: LowRankProjection | None = None
    anchors: AnchorSet | None = None
    standardizer: NormStandardizer | None = None

    @classmethod
    def initialize(cls, cfg: RouterConfig, rng: Rng) -> "RouterState":
        if cfg.mode is ScoreMode.LINEAR:
            w_g = rng.split("w_g").normal(size=(cfg.d, cfg.n_experts), scale=1.0 / np.sqrt(cfg.d))
            return cls(linear=LinearRouterWeights(w_g))
        w_q = rng.split("w_q").normal(size=(cfg.d, cfg.r), scale=1.0 / np.sqrt(cfg.d))
        proj = LowRankProjection(w_q, np.ones(cfg.d))
        anchors = AnchorSet.on_unit_sphere(rng.split("anchors"), cfg.n_experts, cfg.n_anchors, cfg.r)
        std = NormStandardizer() if cfg.norm_style is NormStyle.RUNNING_SCALAR_NORM else None
        return cls(projection=proj, anchors=anchors, standardizer=std)

    def check(self, cfg: RouterConfig) -> None:
        if cfg.mode is ScoreMode.LINEAR:
            if self.linear is None:
                raise ValueError("linear mode needs LinearRouterWeights")
            if self.linear.w_g.shape != (cfg.d, cfg.n_experts):
                raise ValueError(f"W_g has shape {self.linear.w_g.shape}, expected {(cfg.d, cfg.n_experts)}")
            return
        if self.projection is None or self.anchors is None:
            raise ValueError(f"{cfg.mode.value} mode needs a LowRankProjection and an AnchorSet")
        if self.projection.w_q.shape != (cfg.d, cfg.r):
            raise ValueError(f"W_q has shape {self.projection.w_q.shape}, expected {(cfg.d, cfg.r)}")
        if self.projection.rms_gain.shape != (cfg.d,):
            raise ValueError("rms_gain length must equal d")
        expect = (cfg.n_experts, cfg.n_anchors, cfg.r)
        if self.anchors.anchors.shape != expect:
            raise ValueError(f"anchors have shape {self.anchors.anchors.shape}, expected {expect}")
        if cfg.norm_style is NormStyle.RUNNING_SCALAR_NORM and self.standardizer is None:
            raise ValueError("running_scalar_norm style needs a NormStandardizer")

    def copy(self) -> "RouterState":
        def cp(obj):
            if obj is None:
                return None
            return replace(obj, **{f.name: np.copy(getattr(obj, f.name)) for f in fields(obj)
                                   if isinstance(getattr(obj, f.name), np.ndarray)})
        return RouterState(cp(self.linear), cp(self.projection), cp(self.anchors),
                           replace(self.standardizer) if self.standardizer else None)


# ---------------------------------------------------------------------------
# scalar transforms and single-pair scores
# ---------------------------------------------------------------------------


def phi(norm_hat, gamma: float, beta: float):
    """Bounded query-magnitude factor, always inside [gamma(1-beta), gamma(1+beta)]."""
    return gamma * (1.0 + beta * np.tanh(norm_hat))


def psi(kappa, p: float):
    """Anchor-norm compression around 1."""
    return 1.0 + (np.asarray(kappa, dtype=np.float64) - 1.0) / p


def _clamped_norm(v, eps: float):
    return np.maximum(np.linalg.norm(v, axis=-1), eps)


def cosine_logit(q, k, cfg: RouterConfig):
    """Floored cosine ``q.k / (max(|q|, eps_q) max(|k|, eps_k))``; broadcasts."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    dot = np.sum(q * k, axis=-1)
    return dot / (_clamped_norm(q, cfg.eps_q) * _clamped_norm(k, cfg.eps_k))


def dot_logit(q, k):
    return np.sum(np.asarray(q, dtype=np.float64) * np.asarray(k, dtype=np.float64), axis=-1)


def sips_logit(q, k, norm_hat, cfg: RouterConfig, *, phi_value=None, psi_value=None):
    """Saturated inner-product score ``phi(norm_hat) * psi(|k|) * cos(q, k)``.

    ``phi_value``/``psi_value`` replace the transforms outright; they exist
    so tests can recover the plain dot product by passing ``|q|`` and ``|k|``.
    """
    k = np.asarray(k, dtype=np.float64)
    mag_q = phi(norm_hat, cfg.gamma, cfg.beta) if phi_value is None else phi_value
    mag_k = psi(np.linalg.norm(k, axis=-1), cfg.p) if psi_value is None else psi_value
    return mag_q * mag_k * cosine_logit(q, k, cfg)


def logsumexp(z, axis: int = -1):
    """Max-shifted log-sum-exp. With a single entry along ``axis`` it returns that entry exactly."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def anchor_logits(q, anchors, norm_hat, cfg: RouterConfig):
    """Per-anchor scores under ``cfg.mode`` for queries (..., r) against anchors (..., r)."""
    mode = cfg.mode
    if mode is ScoreMode.L2R_SIPS:
        return sips_logit(q, anchors, norm_hat, cfg)
    if mode in (ScoreMode.L2R_COSINE, ScoreMode.XMOE_COSINE):
        return cosine_logit(q, anchors, cfg)
    if mode is ScoreMode.L2R_DOT:
        return dot_logit(q, anchors)
    raise ValueError("linear mode has no anchors")


def multi_anchor_logit(q, anchors_i, norm_hat, cfg: RouterConfig) -> float:
    """Expert logit pooled over its H anchors by log-sum-exp."""
    q = as_vector(q, "query")
    anchors_i = np.asarray(anchors_i, dtype=np.float64)
    if anchors_i.ndim != 2 or anchors_i.shape[0] == 0:
        raise ValueError("anchors_i must be a non-empty (H, r) array")
    if anchors_i.shape[1] != q.shape[0]:
        raise ValueError(f"anchor dimension {anchors_i.shape[1]} != query dimension {q.shape[0]}")
    return float(logsumexp(anchor_logits(q[None, :], anchors_i, norm_hat, cfg)))


# ---------------------------------------------------------------------------
# full routers
# ---------------------------------------------------------------------------


def _check_tokens(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d:
        raise ValueError(f"token dimension {x.shape[-1]} != router dimension d={d}")
    return x


def normalize_input(x, proj: LowRankProjection, cfg: RouterConfig) -> np.ndarray:
    if cfg.norm_style is NormStyle.RMSNORM_INPUT:
        return rmsnorm(x, proj.rms_gain, RMS_EPS)
    return np.asarray(x, dtype=np.float64)


def project_query(x, proj: LowRankProjection, cfg: RouterConfig) -> np.ndarray:
    """Routing query ``q = norm(x) W_q``; works for one token or a (T, d) batch."""
    x = _check_tokens(x, cfg.d)
    if proj.w_q.shape != (cfg.d, cfg.r):
        raise ValueError(f"W_q has shape {proj.w_q.shape}, expected {(cfg.d, cfg.r)}")
    return ensure_finite(normalize_input(x, proj, cfg) @ proj.w_q, "project_query")


def linear_logits(x, w: LinearRouterWeights) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.w_g.shape[0]:
        raise ValueError(f"token dimension {x.shape[-1]} != W_g rows {w.w_g.shape[0]}")
    return ensure_finite(x @ w.w_g, "linear_logits")


def query_norm_hat(q, state: RouterState, cfg: RouterConfig):
    """Normalised query norm fed to phi, together with d(norm_hat)/d(|q|)."""
    rho = np.linalg.norm(q, axis=-1)
    if cfg.norm_style is NormStyle.RUNNING_SCALAR_NORM:
        return state.standardizer.standardize(rho), state.standardizer.slope()
    return rho, 1.0


def route_logits_batch(x, state: RouterState, cfg: RouterConfig) -> np.ndarray:
    """Expert logits (T, N) for a token batch (T, d)."""
    state.check(cfg)
    x = _check_tokens(x, cfg.d)
    if cfg.mode is ScoreMode.LINEAR:
        return linear_logits(x, state.linear)
    q = project_query(x, state.projection, cfg)
    norm_hat, _ = query_norm_hat(q, state, cfg)
    per_anchor = anchor_logits(q[:, None, None, :], state.anchors.anchors[None], norm_hat[:, None, None], cfg)
    return ensure_finite(logsumexp(per_anchor, axis=-1), "route_logits")


def route_logits(x, state: RouterState, cfg: RouterConfig) -> np.ndarray:
    """Expert logits (N,) for a single token."""
    x = as_vector(x, "token")
    return route_logits_batch(x[None, :], state, cfg)[0]
