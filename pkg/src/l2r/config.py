"""Flat ``key = value`` configuration files with dotted namespaces.

Every key must appear in :data:`SCHEMA`; unknown or repeated keys are errors.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

from .harness import DEFAULT_SEED, DataConfig, TrainConfig
from .routing import RouterConfig, ScoreMode

SEED_ENV = "L2R_SEED"


class ConfigError(ValueError):
    pass


def _defaults() -> dict[str, str]:
    out = {"run.seed": str(DEFAULT_SEED)}
    out.update(RouterConfig().to_kv())
    t = TrainConfig()
    for name in ("steps", "batch_size", "lr", "momentum", "lambda_bal", "lambda_z", "snapshot_interval",
                 "router_lr_scale", "anchor_lr_scale", "expert_lr_scale"):
        out[f"train.{name}"] = repr(getattr(t, name))
    dc = DataConfig()
    out.update({"data.n_clusters": repr(dc.n_clusters), "data.n_per_cluster": repr(dc.n_per_cluster),
                "data.noise_sigma": repr(dc.noise_sigma)})
    out.update({
        "landscape.anchor": "-2,0",
        "landscape.x_range": "-3,3",
        "landscape.y_range": "-3,3",
        "landscape.resolution": "121",
        "landscape.variants": "dot,cosine,sips:0,sips:0.25,sips:1",
        "variance.dims": "2,8,32,512",
        "variance.n_samples": "10000",
        "variance.max_pairs": "1000000",
        "params.d": "2048",
        "params.n_experts": "64",
        "params.layers": "16",
        "params.ranks": "2,4,8,16,32",
        "params.heads": "1,2,4,8,16",
        "params.include_norm": "true",
        "params.golden": "false",
        "gradcheck.n_instances": "10000",
        "gradcheck.r": "3",
        "gradcheck.n_anchors": "4",
        "gradcheck.h": "1e-06",
        "gradcheck.norm_min": "0.1",
        "gradcheck.norm_max": "10.0",
        "gradcheck.tol": "1e-05",
        "gradcheck.model_tol": "0.0001",
        "gradcheck.model_instances": "30",
        "gradcheck.model_d": "8",
        "gradcheck.model_r": "2",
        "gradcheck.model_n_experts": "4",
        "gradcheck.model_n_anchors": "2",
        "gradcheck.model_tokens": "16",
        "bounds.rho_min": "0.1",
        "bounds.rho_max": "10.0",
        "bounds.kappa_min": "0.1",
        "bounds.kappa_max": "2.0",
        "bounds.n_samples": "100000",
        "compare.modes": "linear,l2r_sips",
        "compare.seeds": "0,1,2",
        "compare.check_entropy": "false",
    })
    return out


SCHEMA: dict[str, str] = _defaults()


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load(path: str | Path | None = None, overrides: dict[str, str] | None = None,
         seed: int | None = None) -> dict[str, str]:
    """Resolved config: defaults < file < overrides < $L2R_SEED < ``seed``."""
    resolved = dict(SCHEMA)
    if path is not None:
        p = Path(path)
        resolved.update(parse_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[key] = value
    env = os.environ.get(SEED_ENV)
    if env is not None:
        resolved["run.seed"] = env.strip()
    if seed is not None:
        resolved["run.seed"] = str(seed)
    return resolved


def dumps(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg: dict[str, str]) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()[:16]


# typed accessors ----------------------------------------------------------


def get_int(cfg, key: str) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {cfg[key]!r}") from None


def get_float(cfg, key: str) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {cfg[key]!r}") from None


def get_bool(cfg, key: str) -> bool:
    low = cfg[key].strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {cfg[key]!r}")


def get_list(cfg, key: str) -> list[str]:
    return [part.strip() for part in cfg[key].split(",") if part.strip()]


def get_floats(cfg, key: str) -> list[float]:
    try:
        return [float(v) for v in get_list(cfg, key)]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {cfg[key]!r}") from None


def get_ints(cfg, key: str) -> list[int]:
    try:
        return [int(v) for v in get_list(cfg, key)]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {cfg[key]!r}") from None


def router_config(cfg) -> RouterConfig:
    try:
        return RouterConfig.from_kv({k: v for k, v in cfg.items() if k.startswith(("router.", "sips."))})
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg) -> TrainConfig:
    try:
        return TrainConfig(
            steps=get_int(cfg, "train.steps"),
            batch_size=get_int(cfg, "train.batch_size"),
            lr=get_float(cfg, "train.lr"),
            momentum=get_float(cfg, "train.momentum"),
            lambda_bal=get_float(cfg, "train.lambda_bal"),
            lambda_z=get_float(cfg, "train.lambda_z"),
            snapshot_interval=get_int(cfg, "train.snapshot_interval"),
            router_lr_scale=get_float(cfg, "train.router_lr_scale"),
            anchor_lr_scale=get_float(cfg, "train.anchor_lr_scale"),
            expert_lr_scale=get_float(cfg, "train.expert_lr_scale"),
            seed=get_int(cfg, "run.seed"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def data_config(cfg) -> DataConfig:
    return DataConfig(get_int(cfg, "data.n_clusters"), get_int(cfg, "data.n_per_cluster"),
                      get_float(cfg, "data.noise_sigma"))


def score_modes(cfg, key: str) -> list[ScoreMode]:
    try:
        return [ScoreMode.parse(m) for m in get_list(cfg, key)]
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
