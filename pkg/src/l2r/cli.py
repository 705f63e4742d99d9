"""``l2r`` command-line entry point.

Every invocation resolves a flat config, writes its data files under
``--output-dir`` and finishes by writing ``manifest.json``. Data files carry
no timestamps, so reruns with the same config and seed are byte-identical.

Exit codes: 0 all checks passed, 1 a check failed, 2 bad config or
arguments, 3 a runtime error inside a command.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as conf
from .calculus import LipschitzDomain, gradient_check_suite, verify_bounds
from .diagnostics import (IMPORTANCE_NOTE, export_routing_pca, pairwise_cosine_variance, score_landscape,
                          sips_landscape_bound, usage_entropy, usage_from_arrays)
from .efficiency import compare_reported, linear_router_params, router_param_grid
from .gating import decisions_from_logits
from .harness import compare_modes, make_dataset, routing_space, train
from .numeric import Rng, sample_unit_sphere
from .routing import ScoreMode, psi
from .tabular import FORMATS, format_value, write_table
from .toy_model import router_logits

log = logging.getLogger("l2r")

COMMANDS = ("landscape", "variance", "params", "gradcheck", "bounds", "train", "compare", "usage", "pca-export")


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float | str | None = None
    threshold: float | str | None = None

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": _jsonable(self.value),
                "threshold": _jsonable(self.threshold)}


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, np.integer):
        return int(v)
    return v


@dataclass
class Context:
    command: str
    cfg: dict[str, str]
    out_dir: Path
    fmt: str
    outputs: list[Path] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return conf.get_int(self.cfg, "run.seed")

    def meta(self, **extra) -> dict[str, str]:
        out = {"artifact_version": __version__, "command": self.command,
               "config_hash": conf.config_hash(self.cfg), "seed": str(self.seed)}
        out.update({k: format_value(v) for k, v in extra.items()})
        return out

    def table(self, stem: str, columns, rows, **meta) -> Path:
        ext = "csv" if self.fmt == "csv" else "jsonl"
        path = self.out_dir / f"{stem}.{ext}"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_table(path, columns, list(rows), self.meta(**meta), self.fmt)
        self.outputs.append(path)
        return path

    def text(self, name: str, content: str) -> Path:
        path = self.out_dir / name
        path.write_text(content, encoding="utf-8")
        self.outputs.append(path)
        return path

    def check(self, name: str, passed: bool, value=None, threshold=None) -> None:
        self.checks.append(Check(name, bool(passed), value, threshold))
        log.info("check %s: %s (value=%s, threshold=%s)", name, "pass" if passed else "FAIL", value, threshold)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _parse_variant(text: str) -> tuple[ScoreMode, float | None, str]:
    name, _, beta = text.partition(":")
    name = name.strip().lower()
    aliases = {"dot": ScoreMode.L2R_DOT, "cosine": ScoreMode.L2R_COSINE, "sips": ScoreMode.L2R_SIPS}
    try:
        mode = aliases.get(name) or ScoreMode.parse(name)
    except ValueError as exc:
        raise conf.ConfigError(f"landscape.variants: {exc}") from None
    if beta and mode is not ScoreMode.L2R_SIPS:
        raise conf.ConfigError(f"landscape.variants: only sips takes a beta, got {text!r}")
    b = None
    if beta:
        try:
            b = float(beta)
        except ValueError:
            raise conf.ConfigError(f"landscape.variants: bad beta in {text!r}") from None
    label = mode.value.removeprefix("l2r_") + (f"_beta{b:g}" if b is not None else "")
    return mode, b, label


def _grid_rows(grid):
    xs, ys = grid.axes()
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            yield float(x), float(y), float(grid.values[iy, ix])


def cmd_landscape(ctx: Context) -> None:
    base = conf.router_config(ctx.cfg).with_(r=2, n_anchors=1)
    anchor = np.array(conf.get_floats(ctx.cfg, "landscape.anchor"))
    if anchor.shape != (2,):
        raise conf.ConfigError("landscape.anchor must have exactly two components")
    xr = tuple(conf.get_floats(ctx.cfg, "landscape.x_range"))
    yr = tuple(conf.get_floats(ctx.cfg, "landscape.y_range"))
    if len(xr) != 2 or len(yr) != 2:
        raise conf.ConfigError("landscape ranges need two values each")
    res = conf.get_int(ctx.cfg, "landscape.resolution")
    grids = {}
    for text in conf.get_list(ctx.cfg, "landscape.variants"):
        mode, beta, label = _parse_variant(text)
        cfg = base.with_(mode=mode, beta=base.beta if beta is None else beta)
        grid = score_landscape(anchor, cfg, xr, yr, res)
        grids[label] = (cfg, grid)
        ctx.table(f"landscape_{label}", ("x", "y", "logit"), _grid_rows(grid), mode=mode.value,
                  beta=f"{cfg.beta:.17g}", anchor=",".join(f"{a:.17g}" for a in anchor))
        if mode is ScoreMode.L2R_SIPS:
            bound = sips_landscape_bound(anchor, cfg)
            peak = float(np.abs(grid.values).max())
            ctx.check(f"{label}_bounded", peak <= bound * (1 + 1e-12), peak, bound)
        if mode is ScoreMode.L2R_DOT:
            wide = score_landscape(anchor, cfg, tuple(2 * v for v in xr), tuple(2 * v for v in yr), res)
            err = float(np.abs(wide.values - 2 * grid.values).max())
            ctx.check(f"{label}_linear_in_extent", err <= 1e-9 * max(1.0, float(np.abs(wide.values).max())), err,
                      1e-9)
    cosine = grids.get("cosine")
    for label, (cfg, grid) in grids.items():
        if cosine is not None and cfg.mode is ScoreMode.L2R_SIPS and cfg.beta == 0:
            # with beta = 0 the query factor is the constant gamma; the anchor factor psi(|k|) stays
            scale = cfg.gamma * float(psi(np.linalg.norm(anchor), cfg.p))
            err = float(np.abs(grid.values - scale * cosine[1].values).max())
            ctx.check(f"{label}_matches_scaled_cosine", err <= 1e-9, err, 1e-9)


def cmd_variance(ctx: Context) -> None:
    dims = conf.get_ints(ctx.cfg, "variance.dims")
    n = conf.get_int(ctx.cfg, "variance.n_samples")
    max_pairs = conf.get_int(ctx.cfg, "variance.max_pairs")
    root = Rng(ctx.seed, "variance")
    reports = []
    for r in dims:
        v = sample_unit_sphere(root.split(f"samples/{r}"), r, n)
        reports.append(pairwise_cosine_variance(v, max_pairs, root.split(f"pairs/{r}")))
    ctx.table("variance", ("r", "variance", "n_pairs", "isotropic_reference"),
              [(rep.dimension, rep.variance, rep.n_pairs, rep.isotropic_reference) for rep in reports],
              n_samples=n)
    for rep in reports:
        if rep.dimension == 2:
            ctx.check("r2_variance_near_half", abs(rep.variance - 0.5) <= 0.02, rep.variance, "0.5 +/- 0.02")
    ordered = sorted(reports, key=lambda rep: rep.dimension)
    decreasing = all(a.variance > b.variance for a, b in zip(ordered, ordered[1:]))
    ctx.check("variance_strictly_decreasing", decreasing, ",".join(f"{rep.variance:.6g}" for rep in ordered))


def cmd_params(ctx: Context) -> None:
    d = conf.get_int(ctx.cfg, "params.d")
    n = conf.get_int(ctx.cfg, "params.n_experts")
    layers = conf.get_int(ctx.cfg, "params.layers")
    cells = router_param_grid(d, n, layers, conf.get_ints(ctx.cfg, "params.ranks"), conf.get_ints(ctx.cfg, "params.heads"),
                   conf.get_bool(ctx.cfg, "params.include_norm"))
    base = linear_router_params(d, n, layers)
    ctx.table("params", ("r", "heads", "per_layer", "total", "count_text", "percent", "percent_text"),
              [(c.r, c.heads, c.per_layer, c.total, c.count_text, c.percent, c.percent_text) for c in cells],
              linear_router_total=base.total, d=d, n_experts=n, layers=layers)
    if conf.get_bool(ctx.cfg, "params.golden"):
        mismatches = compare_reported(cells)
        for fld in ("count", "percent"):
            bad = [m for m in mismatches if m.field == fld]
            detail = "; ".join(f"r={m.r},H={m.heads}: want {m.expected} got {m.got}" for m in bad)
            ctx.check(f"golden_{fld}", not bad, detail or "all cells match", "exact")


def cmd_gradcheck(ctx: Context) -> None:
    c = ctx.cfg
    results = gradient_check_suite(
        Rng(ctx.seed, "gradcheck"),
        n_instances=conf.get_int(c, "gradcheck.n_instances"),
        r=conf.get_int(c, "gradcheck.r"),
        n_anchors=conf.get_int(c, "gradcheck.n_anchors"),
        norm_range=(conf.get_float(c, "gradcheck.norm_min"), conf.get_float(c, "gradcheck.norm_max")),
        h=conf.get_float(c, "gradcheck.h"),
        tol=conf.get_float(c, "gradcheck.tol"),
        model_instances=conf.get_int(c, "gradcheck.model_instances"),
        model_shape=tuple(conf.get_int(c, f"gradcheck.model_{k}")
                          for k in ("d", "r", "n_experts", "n_anchors", "tokens")),
        model_tol=conf.get_float(c, "gradcheck.model_tol"),
    )
    ctx.table("gradcheck", ("target", "n_checked", "max_rel_err", "tol", "passed"),
              [(r.target, r.n_checked, r.max_rel_err, r.tol, r.passed) for r in results],
              note="relative error = |analytic - central difference| / max(|analytic|, |numeric|, floor)")
    for r in results:
        ctx.check(f"gradient_{r.target}", r.passed, r.max_rel_err, r.tol)


def cmd_bounds(ctx: Context) -> None:
    c = ctx.cfg
    cfg = conf.router_config(c)
    try:
        domain = LipschitzDomain(conf.get_float(c, "bounds.rho_min"), conf.get_float(c, "bounds.rho_max"),
                                 conf.get_float(c, "bounds.kappa_min"), conf.get_float(c, "bounds.kappa_max"))
    except ValueError as exc:
        raise conf.ConfigError(f"bounds: {exc}") from None
    n = conf.get_int(c, "bounds.n_samples")
    root = Rng(ctx.seed, "bounds")
    sips = verify_bounds(domain, cfg, n, root.split("sips"), ScoreMode.L2R_SIPS)
    dot = verify_bounds(domain, cfg, n, root.split("dot"), ScoreMode.L2R_DOT)
    ctx.table("bounds", ("mode", "lip_q", "lip_k", "samples", "max_grad_q", "max_grad_k", "violations"),
              [(rep.mode, rep.lip_q, rep.lip_k, rep.samples_checked, rep.max_observed_grad_q,
                rep.max_observed_grad_k, rep.violations) for rep in (sips, dot)],
              rho_range=f"{domain.rho_min:g},{domain.rho_max:g}",
              kappa_range=f"{domain.kappa_min:g},{domain.kappa_max:g}",
              note="dot-mode lip_q/lip_k are the exact suprema kappa_max/rho_max on the domain")
    ctx.check("sips_zero_violations", sips.violations == 0, sips.violations, 0)
    threshold = 0.99 * domain.kappa_max
    ctx.check("dot_grad_reaches_kappa_max", dot.max_observed_grad_q > threshold, dot.max_observed_grad_q, threshold)


def _train_from_config(ctx: Context):
    cfg = conf.router_config(ctx.cfg)
    tc = conf.train_config(ctx.cfg)
    dc = conf.data_config(ctx.cfg)
    try:
        data = make_dataset(ctx.seed, dc.n_clusters, cfg.d, dc.n_per_cluster, dc.noise_sigma)
    except ValueError as exc:
        raise conf.ConfigError(f"data: {exc}") from None
    log.info("training %s for %d steps", cfg.mode.value, tc.steps)
    return train(cfg, tc, data), data


def cmd_train(ctx: Context) -> None:
    run, _ = _train_from_config(ctx)
    ctx.text("config.txt", conf.dumps(ctx.cfg))
    ctx.table("history", ("step", "task", "bal", "z", "total", "max_router_norm"),
              [(h.step, h.loss.task, h.loss.bal, h.loss.z, h.loss.total, h.max_router_norm) for h in run.history])
    rows = []
    for step, u in run.snapshots:
        rows.extend((step, i, u.top1_freq[i], u.topk_freq[i], u.importance[i]) for i in range(u.importance.size))
    ctx.table("usage_snapshots", ("step", "expert", "top1_freq", "topk_freq", "importance"), rows,
              note=IMPORTANCE_NOTE)
    summary = run.summary()
    summary["steps_completed"] = len(run.history)
    ctx.table("final_report", ("metric", "value"), sorted(summary.items()),
              failed=run.failed, failure_reason=run.failure_reason or "none")
    ctx.check("run_completed", not run.failed, run.failure_reason or "ok")
    values = [v for h in run.history for v in (h.loss.total, h.max_router_norm)]
    ctx.check("history_finite", all(math.isfinite(v) for v in values))
    if run.model_cfg.mode is not ScoreMode.LINEAR and run.history:
        peak = max(h.max_router_norm for h in run.history)
        ctx.check("anchor_norm_in_range", 0 < peak < 10, peak, "(0, 10)")


def cmd_compare(ctx: Context) -> None:
    cfg = conf.router_config(ctx.cfg)
    modes = conf.score_modes(ctx.cfg, "compare.modes")
    seeds = conf.get_ints(ctx.cfg, "compare.seeds")
    if not modes or not seeds:
        raise conf.ConfigError("compare needs at least one mode and one seed")
    table = compare_modes(cfg, modes, seeds, conf.train_config(ctx.cfg), conf.data_config(ctx.cfg))
    cols = ("mode", "seed", "final_task_ce", "final_bal", "entropy_top1", "entropy_importance",
            "query_cosine_variance", "failed")
    ctx.table("compare", cols, [(r.mode.value, r.seed, r.final_task_ce, r.final_bal, r.entropy_top1,
                                 r.entropy_importance, r.query_cosine_variance, r.failed) for r in table.rows])
    agg = table.aggregate()
    agg_cols = tuple(agg[0].keys())
    ctx.table("compare_aggregate", agg_cols, [tuple(a[k] for k in agg_cols) for a in agg])
    ctx.check("all_runs_completed", not any(r.failed for r in table.rows))
    if conf.get_bool(ctx.cfg, "compare.check_entropy"):
        if ScoreMode.LINEAR not in modes or ScoreMode.L2R_SIPS not in modes:
            raise conf.ConfigError("compare.check_entropy needs both linear and l2r_sips in compare.modes")
        wins = sum(table.row(ScoreMode.L2R_SIPS, s).entropy_top1 >= table.row(ScoreMode.LINEAR, s).entropy_top1
                   for s in seeds)
        need = math.ceil(2 * len(seeds) / 3)
        ctx.check("sips_top1_entropy_ge_linear", wins >= need, wins, need)


def _trained_routing(ctx: Context):
    run, data = _train_from_config(ctx)
    ctx.check("run_completed", not run.failed, run.failure_reason or "ok")
    model = run.model
    logits = router_logits(model, data.x)
    return run, data, model, logits


def cmd_usage(ctx: Context) -> None:
    run, data, model, logits = _trained_routing(ctx)
    decisions = decisions_from_logits(logits, model.cfg)
    scores = np.stack([dec.scores for dec in decisions])
    selected = np.array([dec.selected for dec in decisions])
    u = usage_from_arrays(scores, selected)
    h_top1, h_imp = usage_entropy(u)
    ctx.table("usage", ("expert", "top1_freq", "topk_freq", "importance"),
              [(i, u.top1_freq[i], u.topk_freq[i], u.importance[i]) for i in range(u.importance.size)],
              note=IMPORTANCE_NOTE, n_tokens=u.n_tokens, entropy_top1=f"{h_top1:.17g}",
              entropy_importance=f"{h_imp:.17g}")
    ctx.check("importance_sums_to_one", abs(u.importance.sum() - 1) <= 1e-12, float(u.importance.sum()), 1.0)


def cmd_pca_export(ctx: Context) -> None:
    run, data, model, logits = _trained_routing(ctx)
    decisions = decisions_from_logits(logits, model.cfg)
    export = export_routing_pca(data.x, routing_space(model, data.x), decisions)
    cols = export.columns + ("label",)
    ctx.table("pca_export", cols, [row + (int(data.labels[t]),) for t, row in enumerate(export.rows)],
              x_degenerate=export.x_degenerate, q_projected=export.q_projected)


HANDLERS = {
    "landscape": cmd_landscape,
    "variance": cmd_variance,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
    "bounds": cmd_bounds,
    "train": cmd_train,
    "compare": cmd_compare,
    "usage": cmd_usage,
    "pca-export": cmd_pca_export,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="l2r", description="Low-rank MoE routing diagnostics and verification.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--output-dir", type=Path, default=Path("l2r_out"))
    p.add_argument("--seed", type=int, help="overrides run.seed and $L2R_SEED")
    p.add_argument("--format", choices=FORMATS, default="csv")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise conf.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _error(kind: str, message: str) -> dict:
    err = {"type": kind, "message": message}
    print(json.dumps({"error": err}), file=sys.stderr)
    return err


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started, t0 = _now(), time.perf_counter()
    out_dir: Path = args.output_dir
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _error("output", f"cannot create output dir {out_dir}: {exc}")
        return 2

    ctx = None
    cfg: dict[str, str] = {}
    error = None
    code = 0
    try:
        cfg = conf.load(args.config, _overrides(args.set), args.seed)
        conf.get_int(cfg, "run.seed")
        ctx = Context(args.command, cfg, out_dir, args.format)
        HANDLERS[args.command](ctx)
    except conf.ConfigError as exc:
        error, code = _error("config", str(exc)), 2
    except OSError as exc:
        error, code = _error("io", str(exc)), 2
    except (ValueError, FloatingPointError, ArithmeticError) as exc:
        error, code = _error("runtime", f"{type(exc).__name__}: {exc}"), 3

    checks = ctx.checks if ctx else []
    outputs = ctx.outputs if ctx else []
    passed = error is None and all(c.passed for c in checks)
    if code == 0 and not passed:
        code = 1
    manifest = {
        "artifact_version": __version__,
        "command": args.command,
        "config": cfg,
        "config_hash": conf.config_hash(cfg) if cfg else None,
        "seed": cfg.get("run.seed"),
        "format": args.format,
        "inputs": {str(args.config): _sha256(args.config)} if args.config and args.config.is_file() else {},
        "outputs": [{"path": str(p.relative_to(out_dir)), "sha256": _sha256(p)} for p in outputs],
        "checks": [c.as_dict() for c in checks],
        "passed": passed,
        "exit_code": code,
        "error": error,
        "started_at": started,
        "finished_at": _now(),
        "wall_time_s": time.perf_counter() - t0,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value}")
    return code


if __name__ == "__main__":
    sys.exit(main())
