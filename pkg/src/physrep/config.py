"""Experiment configuration: a YAML key tree with defaults, env and CLI overrides.

Precedence, lowest first: built-in defaults, the config file, environment
variables ``PHYSREP_<SECTION>__<KEY>`` (double underscore separates levels),
then ``--set section.key=value`` and the dedicated CLI flags.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping

import yaml

from .nn import EncoderConfig, MaeConfig, PredictorConfig
from .probe import ProbeTrainConfig
from .simulate import SYSTEMS, SystemSpec, default_spec
from .ssl import METHODS, PretrainConfig, VicregWeights

ENV_PREFIX = "PHYSREP_"


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "out": "runs/default",
    "seed": 0,
    "dataset": {
        "systems": list(SYSTEMS),
        "grid": 32,
        "timesteps": 32,
        "n_pretrain": 512,
        "n_labeled": 256,
        "splits": [0.6, 0.2, 0.2],
    },
    "pretrain": {
        "methods": list(METHODS),
        "epochs": 6,
        "batch_size": 32,
        "lr": 3e-3,
        "warmup_frac": 0.05,
        "weight_decay": 0.05,
        "context_frames": 8,
        "windows_per_traj": 4,
        "per_token": False,
        "vicreg": {"lam": 2.0, "mu": 40.0, "nu": 2.0, "eps": 1e-4, "gamma": 1.0},
        "encoder": {"widths": [32, 64], "depths": [1, 1], "downsample": 8, "kernel_size": 3,
                    "mlp_ratio": 4, "out_norm": False},
        "predictor": {"expansion": 4, "depth": 2, "kernel_size": 3},
        "mae": {"patch_size": 4, "tubelet": 2, "enc_dim": 64, "enc_depth": 2, "enc_heads": 4,
                "dec_dim": 32, "dec_depth": 1, "dec_heads": 4, "mlp_ratio": 4,
                "mask_ratio": 0.75, "norm_pix_loss": True},
    },
    "probe": {
        "epochs": 100,
        "batch_size": 32,
        "lr": 1e-3,
        "warmup_frac": 0.05,
        "weight_decay": 0.05,
        "probe_dim": 64,
        "num_queries": 1,
        "num_heads": 1,
        "windows": 4,
        "window_seed": 1234,
        "fractions": [0.1, 0.5, 1.0],
        "seeds": [0, 1, 2],
    },
    "report": {"tolerance": 0.02, "scaling_system": "shearvort"},
}


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_path(tree: dict, dotted: str, raw: str) -> None:
    parts = [p for p in dotted.split(".") if p]
    node = tree
    for i, p in enumerate(parts):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key '{'.'.join(parts[: i + 1])}'")
        if i == len(parts) - 1:
            if isinstance(node[p], dict):
                raise ConfigError(f"config key '{dotted}' is a section, not a leaf")
            try:
                node[p] = yaml.safe_load(raw)
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse value for '{dotted}': {exc}") from None
        else:
            node = node[p]


def env_overrides(environ: Mapping[str, str] | None = None) -> list[tuple[str, str]]:
    environ = os.environ if environ is None else environ
    pairs = []
    for key in sorted(environ):
        if key.startswith(ENV_PREFIX):
            dotted = ".".join(part.lower() for part in key[len(ENV_PREFIX) :].split("__"))
            pairs.append((dotted, environ[key]))
    return pairs


def load_config(path=None, overrides: list[str] = (), environ: Mapping[str, str] | None = None) -> dict:
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = _merge(tree, data)
    for dotted, raw in env_overrides(environ):
        _set_path(tree, dotted, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        dotted, raw = item.split("=", 1)
        _set_path(tree, dotted.strip(), raw)
    validate(tree)
    return tree


def _check_types(tree: dict, defaults: dict, path: str = "") -> None:
    for key, default in defaults.items():
        value, where = tree[key], f"{path}{key}"
        if isinstance(default, dict):
            _check_types(value, default, where + ".")
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigError(f"config key '{where}' expects {type(default).__name__}, got {value!r}")


def validate(cfg: dict) -> None:
    _check_types(cfg, DEFAULTS)
    ds, pre, probe = cfg["dataset"], cfg["pretrain"], cfg["probe"]
    bad = [s for s in ds["systems"] if s not in SYSTEMS]
    if bad or not ds["systems"]:
        raise ConfigError(f"dataset.systems must be a non-empty subset of {list(SYSTEMS)}, got {ds['systems']}")
    bad = [m for m in pre["methods"] if m not in METHODS]
    if bad or not pre["methods"]:
        raise ConfigError(f"pretrain.methods must be a non-empty subset of {list(METHODS)}, got {pre['methods']}")
    if len(ds["splits"]) != 3 or abs(sum(ds["splits"]) - 1.0) > 1e-9 or min(ds["splits"]) <= 0:
        raise ConfigError(f"dataset.splits must be three positive fractions summing to 1, got {ds['splits']}")
    if ds["timesteps"] < 2 * pre["context_frames"]:
        raise ConfigError("dataset.timesteps must be at least 2 * pretrain.context_frames")
    if any(not 0 < f <= 1 for f in probe["fractions"]):
        raise ConfigError(f"probe.fractions must lie in (0, 1], got {probe['fractions']}")
    if not probe["seeds"] or any(not isinstance(s, int) for s in probe["seeds"]):
        raise ConfigError("probe.seeds must be a non-empty list of integers")
    try:
        pretrain_config(cfg, "jepa")
        pretrain_config(cfg, "mae")
        probe_config(cfg)
        for system in ds["systems"]:
            system_spec(cfg, system)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """First 64 bits of sha256 over canonical JSON, as 16 hex digits."""
    return hashlib.sha256(canonical(obj).encode()).hexdigest()[:16]


def system_spec(cfg: dict, system: str) -> SystemSpec:
    return default_spec(system, grid=cfg["dataset"]["grid"], timesteps=cfg["dataset"]["timesteps"])


def pretrain_config(cfg: dict, method: str) -> PretrainConfig:
    pre = cfg["pretrain"]
    enc = dict(pre["encoder"])
    enc["embed_dim"] = enc["widths"][-1]
    return PretrainConfig(
        method=method,
        epochs=pre["epochs"],
        batch_size=pre["batch_size"],
        lr=float(pre["lr"]),
        warmup_frac=float(pre["warmup_frac"]),
        weight_decay=float(pre["weight_decay"]),
        context_frames=pre["context_frames"],
        windows_per_traj=pre["windows_per_traj"],
        per_token=bool(pre["per_token"]),
        vicreg=VicregWeights(**{k: float(v) for k, v in pre["vicreg"].items()}),
        encoder=EncoderConfig(**enc),
        predictor=PredictorConfig(embed_dim=enc["embed_dim"], **pre["predictor"]),
        mae=MaeConfig(**pre["mae"]),
    )


def probe_config(cfg: dict) -> ProbeTrainConfig:
    p = cfg["probe"]
    return ProbeTrainConfig(
        epochs=p["epochs"], batch_size=p["batch_size"], lr=float(p["lr"]), warmup_frac=float(p["warmup_frac"]),
        weight_decay=float(p["weight_decay"]), probe_dim=p["probe_dim"], num_queries=p["num_queries"],
        num_heads=p["num_heads"],
    )


# stage hashes chain so that a change upstream invalidates everything below it


def dataset_hash(cfg: dict, system: str) -> str:
    return config_hash({"stage": "generate", "system": system, "seed": cfg["seed"], "dataset": cfg["dataset"]
                        | {"systems": None}})


def pretrain_hash(cfg: dict, system: str, method: str) -> str:
    pre = {k: v for k, v in cfg["pretrain"].items() if k != "methods"}
    return config_hash({"stage": "pretrain", "data": dataset_hash(cfg, system), "method": method, "pretrain": pre,
                        "seed": cfg["seed"]})


def probe_hash(cfg: dict, system: str, method: str) -> str:
    return config_hash({"stage": "probe", "encoder": pretrain_hash(cfg, system, method), "probe": cfg["probe"]})
