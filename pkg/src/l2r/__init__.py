"""Low-rank latent routing for mixture-of-experts layers, with saturated
inner-product scoring, multi-anchor experts and self-verifying diagnostics."""

from .gating import RoutingDecision, decide, moe_forward, softmax_temp, top_k_select
from .losses import LossBreakdown, LossWeights, load_balance_loss, z_loss
from .numeric import Rng
from .routing import NormStyle, RouterConfig, RouterState, ScoreMode, route_logits, route_logits_batch

__version__ = "0.1.0"

__all__ = [
    "LossBreakdown",
    "LossWeights",
    "NormStyle",
    "Rng",
    "RouterConfig",
    "RouterState",
    "RoutingDecision",
    "ScoreMode",
    "__version__",
    "decide",
    "load_balance_loss",
    "moe_forward",
    "route_logits",
    "route_logits_batch",
    "softmax_temp",
    "top_k_select",
    "z_loss",
]
