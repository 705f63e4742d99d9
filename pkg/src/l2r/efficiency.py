"""Exact router parameter and multiply-add accounting."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .routing import ScoreMode

GRID_RANKS = (2, 4, 8, 16, 32)
GRID_HEADS = (1, 2, 4, 8, 16)

# Published router parameter counts for OLMoE (d=2048, N=64, 16 layers), verbatim.
OLMOE_REPORTED = {
    2: (("100.352K", "4.79"), ("102.400K", "4.88"), ("106.496K", "5.08"), ("114.688K", "5.47"), ("131.072K", "6.25")),
    4: (("167.936K", "8.01"), ("172.032K", "8.20"), ("180.224K", "8.59"), ("196.608K", "9.38"), ("229.376K", "10.94")),
    8: (("303.104K", "14.46"), ("311.296K", "14.84"), ("327.680K", "15.62"), ("360.448K", "17.19"), ("425.984K", "20.32")),
    16: (("573.440K", "27.34"), ("589.824K", "28.12"), ("622.592K", "29.69"), ("688.128K", "32.81"), ("819.200K", "39.07")),
    32: (("1.114M", "53.11"), ("1.147M", "54.68"), ("1.212M", "57.81"), ("1.343M", "64.06"), ("1.606M", "76.59")),
}


def _positive(**values: int) -> None:
    for name, v in values.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")


@dataclass(frozen=True)
class ParamCount:
    per_layer: int
    total: int
    fraction_of_linear: Fraction

    @property
    def percent(self) -> float:
        return float(self.fraction_of_linear * 100)


def linear_router_params(d: int, n_experts: int, layers: int) -> ParamCount:
    _positive(d=d, n_experts=n_experts, layers=layers)
    per = d * n_experts
    return ParamCount(per, per * layers, Fraction(1))


def l2r_router_params(d: int, r: int, n_experts: int, n_anchors: int, layers: int,
                      include_norm: bool = True) -> ParamCount:
    """``d*r + N*H*r`` per layer, plus ``d`` RMSNorm gains when ``include_norm``.

    The reported OLMoE counts only reconcile with the per-layer formula once
    the router-input norm gains are included, which is why that is the default.
    """
    _positive(d=d, r=r, n_experts=n_experts, n_anchors=n_anchors, layers=layers)
    if r > d:
        raise ValueError("r must not exceed d")
    per = d * r + n_experts * n_anchors * r + (d if include_norm else 0)
    total = per * layers
    return ParamCount(per, total, Fraction(total, d * n_experts * layers))


@dataclass(frozen=True)
class FlopCount:
    mode: ScoreMode
    macs: int
    pooling_ops: int
    asymptotic: str
    ratio_to_linear: Fraction


def routing_flops(d: int, r: int, n_experts: int, n_anchors: int, mode: ScoreMode | str) -> FlopCount:
    """Per-token multiply-adds of the router; LSE pooling is reported separately."""
    _positive(d=d, r=r, n_experts=n_experts, n_anchors=n_anchors)
    mode = ScoreMode.parse(mode)
    lin = d * n_experts
    if mode is ScoreMode.LINEAR:
        return FlopCount(mode, lin, 0, "O(dN)", Fraction(1))
    macs = d * r + n_experts * n_anchors * r
    # closed form r/N + H r/d of the ratio (d r + N H r) / (d N)
    ratio = Fraction(r, n_experts) + Fraction(n_anchors * r, d)
    return FlopCount(mode, macs, n_experts * n_anchors, "O(dr + NHr)", ratio)


def format_count(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.3f}M"
    if n >= 1_000:
        return f"{n / 1e3:.3f}K"
    return str(n)


@dataclass(frozen=True)
class GridCell:
    r: int
    heads: int
    per_layer: int
    total: int
    percent: float

    @property
    def count_text(self) -> str:
        return format_count(self.total)

    @property
    def percent_text(self) -> str:
        return f"{self.percent:.2f}"


def router_param_grid(d: int = 2048, n_experts: int = 64, layers: int = 16, ranks=GRID_RANKS, heads=GRID_HEADS,
           include_norm: bool = True) -> list[GridCell]:
    cells = []
    for r in ranks:
        for h in heads:
            pc = l2r_router_params(d, r, n_experts, h, layers, include_norm)
            cells.append(GridCell(r, h, pc.per_layer, pc.total, pc.percent))
    return cells


@dataclass(frozen=True)
class GoldenMismatch:
    r: int
    heads: int
    field: str
    expected: str
    got: str


def compare_reported(cells: list[GridCell]) -> list[GoldenMismatch]:
    """Differences against the published OLMoE values (count text and two-decimal percent)."""
    out = []
    for cell in cells:
        if cell.r not in OLMOE_REPORTED or cell.heads not in GRID_HEADS:
            continue
        want_count, want_pct = OLMOE_REPORTED[cell.r][GRID_HEADS.index(cell.heads)]
        if cell.count_text != want_count:
            out.append(GoldenMismatch(cell.r, cell.heads, "count", want_count, cell.count_text))
        if cell.percent_text != want_pct:
            out.append(GoldenMismatch(cell.r, cell.heads, "percent", want_pct, cell.percent_text))
    return out
