"""Frozen-encoder attentive probes for governing-parameter regression.

Targets are log-transformed where the parameter was sampled log-uniformly,
then standardized with probe-train statistics, so every reported MSE is on
a unit-variance scale where predicting the mean scores about 1.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import AttentiveProbe, ProbeConfig
from .optim import AdamW, cosine_lr
from .rng import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

FRACTIONS = (0.1, 0.5, 1.0)
RESULT_COLUMNS = ["method", "system", "fraction", "seed", "param1_mse", "param2_mse", "avg_mse"]
TARGET_CONVENTION = "MSE on standardized targets (log-transformed where log-uniform; train-split mean/std)"


@dataclass
class ProbeTask:
    system: str
    param_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    log_transform: tuple[bool, ...]

    def __post_init__(self):
        self.param_names = tuple(self.param_names)
        self.log_transform = tuple(bool(v) for v in self.log_transform)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(~(self.std > 0)):
            raise ValueError(f"ProbeTask {self.system}: target std must be positive, got {self.std}")

    @classmethod
    def fit(cls, system: str, param_names, log_transform, train_params: Sequence[dict]) -> ProbeTask:
        raw = raw_matrix(param_names, train_params)
        if len(raw) == 0:
            raise ValueError("ProbeTask.fit: empty train split")
        z = _forward_transform(raw, log_transform)
        return cls(system, tuple(param_names), z.mean(axis=0), z.std(axis=0), tuple(log_transform))

    def to_dict(self) -> dict:
        return {"system": self.system, "param_names": list(self.param_names), "mean": self.mean.tolist(),
                "std": self.std.tolist(), "log_transform": list(self.log_transform)}


def raw_matrix(param_names, params: Sequence[dict]) -> np.ndarray:
    return np.array([[float(p[k]) for k in param_names] for p in params], dtype=np.float64).reshape(-1, len(param_names))


def _forward_transform(raw: np.ndarray, log_flags) -> np.ndarray:
    z = np.array(raw, dtype=np.float64)
    for j, flag in enumerate(log_flags):
        if flag:
            if np.any(z[:, j] <= 0):
                raise ValueError("log-transformed parameter must be positive")
            z[:, j] = np.log(z[:, j])
    return z


def standardize(task: ProbeTask, raw) -> np.ndarray:
    """Raw parameter matrix [n, P] (or list of dicts) -> standardized targets."""
    if not isinstance(raw, np.ndarray):
        raw = raw_matrix(task.param_names, raw)
    return (_forward_transform(raw, task.log_transform) - task.mean) / task.std


def destandardize(task: ProbeTask, z: np.ndarray) -> np.ndarray:
    out = np.asarray(z, dtype=np.float64) * task.std + task.mean
    for j, flag in enumerate(task.log_transform):
        if flag:
            out[:, j] = np.exp(out[:, j])
    return out


# ---------------------------------------------------------------------------
# token caches
# ---------------------------------------------------------------------------


def window_offsets(n_traj: int, t_total: int, k: int, windows: int, seed: int) -> np.ndarray:
    """Fixed per-trajectory window starts [n, windows], drawn from a stream independent of probe seeds."""
    if t_total < k:
        raise ValueError(f"window_offsets: trajectories of {t_total} frames cannot hold a {k}-frame window")
    return np.stack([make_rng(seed, "probe-windows", i).integers(0, t_total - k + 1, size=windows) for i in range(n_traj)]).reshape(n_traj, windows)


def encode_windows(token_fn: Callable[[np.ndarray], np.ndarray], frames: np.ndarray, offsets: np.ndarray,
                   k: int, batch: int = 32) -> np.ndarray:
    """Tokens for every (trajectory, window): [n, windows, L, D] float32."""
    n, w = offsets.shape
    flat = [(i, int(o)) for i in range(n) for o in offsets[i]]
    out = None
    for start in range(0, len(flat), batch):
        chunk = flat[start : start + batch]
        clips = np.stack([frames[i, o : o + k] for i, o in chunk]).transpose(0, 2, 1, 3, 4)
        tok = token_fn(np.ascontiguousarray(clips, dtype=np.float64))
        tok = tok.reshape(len(chunk), -1, tok.shape[-1]).astype(np.float32)
        if out is None:
            out = np.empty((len(flat), *tok.shape[1:]), dtype=np.float32)
        out[start : start + len(chunk)] = tok
    if out is None:
        raise ValueError("encode_windows: no windows to encode")
    return out.reshape(n, w, *out.shape[1:])


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class ProbeTrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    probe_dim: int = 64
    num_queries: int = 1
    num_heads: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("ProbeTrainConfig: epochs, batch_size and lr must be positive")


@dataclass
class ProbeResult:
    probe: AttentiveProbe
    best_epoch: int
    best_val_mse: float
    train_curve: list[float]
    val_curve: list[float]
    train_ids: list[int]


def nested_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """First ceil(fraction * n) entries of a seeded permutation, so smaller fractions nest inside larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    count = int(math.ceil(round(fraction * n, 9)))
    if count < 1:
        raise ValueError(f"fraction {fraction} of {n} trajectories selects none")
    return np.sort(make_rng(seed, "probe-subset").permutation(n)[:count])


def predict_windows(probe: AttentiveProbe, tokens: np.ndarray, batch: int = 128) -> np.ndarray:
    """Predictions for every window of tokens [n, windows, L, D] -> [n, windows, P]."""
    n, w = tokens.shape[:2]
    flat = tokens.reshape(n * w, *tokens.shape[2:])
    outs = []
    with T.no_grad():
        for i in range(0, len(flat), batch):
            outs.append(probe(Tensor(flat[i : i + batch].astype(np.float64))).data)
    return np.concatenate(outs).reshape(n, w, -1)


def predict(probe: AttentiveProbe, tokens: np.ndarray, batch: int = 128) -> np.ndarray:
    """Per-trajectory predictions: mean over windows."""
    return predict_windows(probe, tokens, batch).mean(axis=1)


def train_probe(train_tokens: np.ndarray, train_y: np.ndarray, val_tokens: np.ndarray, val_y: np.ndarray,
                cfg: ProbeTrainConfig, seed: int, fraction: float = 1.0) -> ProbeResult:
    """Fit an attentive probe on cached frozen-encoder tokens; keeps the best-validation weights."""
    if len(val_tokens) == 0:
        raise ValueError("train_probe: empty validation split")
    ids = nested_subset(len(train_tokens), fraction, seed)
    x = train_tokens[ids]
    y = train_y[ids]
    n, w = x.shape[:2]
    x = x.reshape(n * w, *x.shape[2:])
    y = np.repeat(y, w, axis=0)
    pcfg = ProbeConfig(token_dim=x.shape[-1], probe_dim=cfg.probe_dim, num_queries=cfg.num_queries,
                       num_heads=cfg.num_heads, num_outputs=y.shape[1])
    probe = AttentiveProbe(pcfg, seed)
    opt = AdamW(probe.parameters(), weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = min(int(round(cfg.warmup_frac * total)), total - 1)
    best = (math.inf, -1, probe.state_dict())
    train_curve, val_curve = [], []
    step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(seed, "probe-order", epoch).permutation(len(x))
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            opt.zero_grad()
            loss = T.mse_loss(probe(Tensor(x[idx].astype(np.float64))), y[idx])
            T.backward(loss)
            opt.step(cosine_lr(step, total, cfg.lr, warmup))
            running += loss.item() * len(idx)
            step += 1
        train_curve.append(running / len(x))
        val = float(np.mean((predict(probe, val_tokens) - val_y) ** 2))
        val_curve.append(val)
        if val < best[0]:
            best = (val, epoch, probe.state_dict())
    probe.load_state_dict(best[2])
    return ProbeResult(probe, best[1], best[0], train_curve, val_curve, ids.tolist())


@dataclass
class EvalReport:
    method: str
    system: str
    fraction: float
    seed: int
    param_mse: list[float]
    avg_mse: float = field(init=False)
    epochs: int = 0
    param_names: list[str] = field(default_factory=list)
    window_mse: list[float] = field(default_factory=list)  # averaged MSE when each window predicts alone

    def __post_init__(self):
        self.param_mse = [float(v) for v in self.param_mse]
        self.avg_mse = float(np.mean(self.param_mse))

    def row(self) -> dict:
        return {"method": self.method, "system": self.system, "fraction": self.fraction, "seed": self.seed,
                "param1_mse": self.param_mse[0], "param2_mse": self.param_mse[1], "avg_mse": self.avg_mse}


def evaluate_mse(probe: AttentiveProbe, test_tokens: np.ndarray, test_y: np.ndarray, method: str, system: str,
                 fraction: float, seed: int, epochs: int = 0, param_names: Sequence[str] = ()) -> EvalReport:
    if len(test_tokens) == 0:
        raise ValueError("evaluate_mse: empty test split")
    per_window = predict_windows(probe, test_tokens)
    rep = report_from_predictions(per_window.mean(axis=1), test_y, method, system, fraction, seed, epochs, param_names)
    rep.window_mse = [float(((per_window[:, j] - test_y) ** 2).mean()) for j in range(per_window.shape[1])]
    return rep


def report_from_predictions(pred: np.ndarray, target: np.ndarray, method: str, system: str, fraction: float,
                            seed: int, epochs: int = 0, param_names: Sequence[str] = ()) -> EvalReport:
    per = ((np.asarray(pred) - np.asarray(target)) ** 2).mean(axis=0)
    return EvalReport(method, system, float(fraction), int(seed), per.tolist(), epochs, list(param_names))


@dataclass
class TokenSplits:
    """Cached tokens and standardized targets for one (method, system)."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    y_train: np.ndarray
    y_val: np.ndarray
    y_test: np.ndarray


def data_fraction_grid(method: str, task: ProbeTask, splits: TokenSplits, cfg: ProbeTrainConfig,
                       fractions: Sequence[float] = FRACTIONS, seeds: Sequence[int] = (0, 1, 2)) -> list[EvalReport]:
    reports = []
    for seed in seeds:
        for frac in fractions:
            res = train_probe(splits.train, splits.y_train, splits.val, splits.y_val, cfg, seed, frac)
            rep = evaluate_mse(res.probe, splits.test, splits.y_test, method, task.system, frac, seed,
                               cfg.epochs, task.param_names)
            log.info("probe %s/%s frac=%.2f seed=%d avg_mse=%.4f (best epoch %d)",
                     method, task.system, frac, seed, rep.avg_mse, res.best_epoch)
            reports.append(rep)
    return reports


# ---------------------------------------------------------------------------
# results files
# ---------------------------------------------------------------------------


def _key(r: dict) -> tuple:
    return (r["method"], r["system"], float(r["fraction"]), int(r["seed"]))


def merge_reports(reports: Sequence[EvalReport]) -> list[dict]:
    rows: dict[tuple, dict] = {}
    for rep in reports:
        row = rep.row()
        k = _key(row)
        if k in rows:
            raise ValueError(f"duplicate result cell {k}")
        rows[k] = row
    return [rows[k] for k in sorted(rows)]


def write_results(path, reports: Sequence[EvalReport]) -> tuple[Path, Path]:
    """CSV with the fixed result columns plus a JSON mirror carrying the target convention."""
    rows = merge_reports(reports)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    mirror = path.with_suffix(".json")
    extra = {_key(rep.row()): rep for rep in reports}
    payload = {
        "target_convention": TARGET_CONVENTION,
        "rows": [{**r, "param_names": extra[_key(r)].param_names, "epochs": extra[_key(r)].epochs,
                  "window_mse": extra[_key(r)].window_mse} for r in rows],
    }
    mirror.write_text(json.dumps(payload, indent=1))
    return path, mirror


def read_results(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"results file not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({"method": r["method"], "system": r["system"], "fraction": float(r["fraction"]),
                         "seed": int(r["seed"]), "param1_mse": float(r["param1_mse"]),
                         "param2_mse": float(r["param2_mse"]), "avg_mse": float(r["avg_mse"])})
    return rows
