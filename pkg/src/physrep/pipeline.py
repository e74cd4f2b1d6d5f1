"""Stage orchestration: generate -> pretrain -> probe -> report.

Every stage records its config hash in an append-only ledger. A stage whose
hash is already recorded, and whose artifacts still exist, is skipped
unless forced.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import config as C
from .probe import (
    EvalReport,
    ProbeTask,
    TokenSplits,
    data_fraction_grid,
    encode_windows,
    standardize,
    window_offsets,
    write_results,
)
from .simulate import DatasetError, check_manifest, generate_dataset, load_split
from .ssl import frozen_encoder, pretrain

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Raised with a machine-readable code (E_MISSING, E_DATA, ...)."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class LedgerEntry:
    stage: str
    key: str
    hash: str
    artifacts: list[str]


class RunLedger:
    """Append-only JSONL record of finished stages, guarded by a file lock."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path) + ".lock")

    def entries(self) -> list[LedgerEntry]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text().splitlines():
            if line.strip():
                out.append(LedgerEntry(**json.loads(line)))
        return out

    def done(self, stage: str, key: str, digest: str) -> bool:
        for e in self.entries():
            if (e.stage, e.key, e.hash) == (stage, key, digest):
                return all(Path(a).exists() for a in e.artifacts)
        return False

    def record(self, stage: str, key: str, digest: str, artifacts) -> None:
        line = json.dumps({"stage": stage, "key": key, "hash": digest, "artifacts": [str(a) for a in artifacts]},
                          sort_keys=True)
        with self.lock:
            with open(self.path, "a") as f:
                f.write(line + "\n")


def out_dir(cfg: dict) -> Path:
    return Path(cfg["out"])


def ledger(cfg: dict) -> RunLedger:
    return RunLedger(out_dir(cfg) / "ledger.jsonl")


def data_dir(cfg: dict, system: str) -> Path:
    return out_dir(cfg) / "data" / system


def ckpt_path(cfg: dict, system: str, method: str) -> Path:
    return out_dir(cfg) / "pretrain" / system / f"{method}.ckpt"


def cells_path(cfg: dict, system: str, method: str) -> Path:
    return out_dir(cfg) / "probe" / system / f"{method}.json"


def results_path(cfg: dict) -> Path:
    return out_dir(cfg) / "results.csv"


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def _generate_one(args) -> str:
    cfg, system, force = args
    led = ledger(cfg)
    digest = C.dataset_hash(cfg, system)
    directory = data_dir(cfg, system)
    manifest = directory / "manifest.json"
    if not force and led.done("generate", system, digest):
        check_manifest(directory)
        log.info("generate %s: up to date (%s)", system, digest)
        return "skipped"
    ds = cfg["dataset"]
    generate_dataset(directory, C.system_spec(cfg, system), ds["n_pretrain"], ds["n_labeled"], cfg["seed"],
                     tuple(ds["splits"]), config_hash=digest)
    led.record("generate", system, digest, [manifest])
    return "generated"


def run_generate(cfg: dict, force: bool = False, jobs: int = 1) -> dict[str, str]:
    systems = cfg["dataset"]["systems"]
    try:
        status = _map(_generate_one, [(cfg, s, force) for s in systems], jobs)
    except DatasetError as exc:
        raise StageError("E_DATA", str(exc)) from None
    return dict(zip(systems, status))


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def _require_dataset(cfg: dict, system: str):
    directory = data_dir(cfg, system)
    if not (directory / "manifest.json").exists():
        raise StageError("E_MISSING", f"generate stage missing for {system}: no manifest in {directory}")
    try:
        return check_manifest(directory)
    except DatasetError as exc:
        raise StageError("E_DATA", str(exc)) from None


def _pretrain_one(args) -> str:
    cfg, system, method, force = args
    led = ledger(cfg)
    digest = C.pretrain_hash(cfg, system, method)
    path = ckpt_path(cfg, system, method)
    if not force and led.done("pretrain", f"{system}/{method}", digest):
        log.info("pretrain %s/%s: up to date (%s)", system, method, digest)
        return "skipped"
    manifest = _require_dataset(cfg, system)
    frames, _ = load_split(data_dir(cfg, system), "pretrain", manifest)
    res = pretrain(method, frames, C.pretrain_config(cfg, method), cfg["seed"], path.parent, resume=not force,
                   config_hash=digest)
    led.record("pretrain", f"{system}/{method}", digest, [res.checkpoint, res.loss_log])
    return "trained"


def run_pretrain(cfg: dict, methods=None, systems=None, force: bool = False, jobs: int = 1) -> dict[str, str]:
    methods = methods or cfg["pretrain"]["methods"]
    systems = systems or cfg["dataset"]["systems"]
    cells = [(cfg, s, m, force) for s in systems for m in methods]
    status = _map(_pretrain_one, cells, jobs)
    return {f"{s}/{m}": st for (_, s, m, _), st in zip(cells, status)}


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def probe_task(cfg: dict, system: str, manifest) -> ProbeTask:
    spec = manifest.spec
    return ProbeTask.fit(system, spec.param_names, spec.log_uniform, [e["params"] for e in manifest.split("train")])


def token_splits(cfg: dict, system: str, method: str, manifest, task: ProbeTask) -> TokenSplits:
    path = ckpt_path(cfg, system, method)
    if not path.exists():
        raise StageError("E_MISSING", f"pretrain stage missing for {system}/{method}: {path} not found")
    tokens_fn, _, header = frozen_encoder(path)
    k = header["context_frames"]
    pc = cfg["probe"]
    out = {}
    for split in ("train", "val", "test"):
        frames, entries = load_split(data_dir(cfg, system), split, manifest)
        if len(entries) == 0:
            raise StageError("E_DATA", f"{system}: empty {split} split")
        offsets = window_offsets(len(frames), frames.shape[1], k, pc["windows"], pc["window_seed"])
        out[split] = (encode_windows(tokens_fn, frames, offsets, k), standardize(task, [e["params"] for e in entries]))
    return TokenSplits(out["train"][0], out["val"][0], out["test"][0], out["train"][1], out["val"][1], out["test"][1])


def _report_dict(r: EvalReport) -> dict:
    return {"method": r.method, "system": r.system, "fraction": r.fraction, "seed": r.seed,
            "param_mse": r.param_mse, "epochs": r.epochs, "param_names": r.param_names, "window_mse": r.window_mse}


def _report_from_dict(d: dict) -> EvalReport:
    return EvalReport(d["method"], d["system"], d["fraction"], d["seed"], d["param_mse"], d["epochs"], d["param_names"],
                      d.get("window_mse", []))


def _probe_one(args) -> str:
    cfg, system, method, force = args
    led = ledger(cfg)
    digest = C.probe_hash(cfg, system, method)
    path = cells_path(cfg, system, method)
    if not force and led.done("probe", f"{system}/{method}", digest):
        log.info("probe %s/%s: up to date (%s)", system, method, digest)
        return "skipped"
    manifest = _require_dataset(cfg, system)
    task = probe_task(cfg, system, manifest)
    splits = token_splits(cfg, system, method, manifest, task)
    reports = data_fraction_grid(method, task, splits, C.probe_config(cfg), cfg["probe"]["fractions"],
                                 cfg["probe"]["seeds"])
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"hash": digest, "task": task.to_dict(), "reports": [_report_dict(r) for r in reports]}
    path.write_text(json.dumps(payload, indent=1))
    led.record("probe", f"{system}/{method}", digest, [path])
    return "probed"


def collect_reports(cfg: dict, methods=None, systems=None) -> list[EvalReport]:
    methods = methods or cfg["pretrain"]["methods"]
    systems = systems or cfg["dataset"]["systems"]
    reports = []
    for s in systems:
        for m in methods:
            path = cells_path(cfg, s, m)
            if not path.exists():
                raise StageError("E_MISSING", f"probe stage missing for {s}/{m}: {path} not found")
            reports.extend(_report_from_dict(d) for d in json.loads(path.read_text())["reports"])
    return reports


def run_probe(cfg: dict, methods=None, systems=None, force: bool = False, jobs: int = 1) -> Path:
    methods = methods or cfg["pretrain"]["methods"]
    systems = systems or cfg["dataset"]["systems"]
    cells = [(cfg, s, m, force) for s in systems for m in methods]
    _map(_probe_one, cells, jobs)
    csv_path, _ = write_results(results_path(cfg), collect_reports(cfg, methods, systems))
    return csv_path


def run_all(cfg: dict, force: bool = False, jobs: int = 1) -> Path:
    from .report import write_report

    run_generate(cfg, force, jobs)
    run_pretrain(cfg, force=force, jobs=jobs)
    path = run_probe(cfg, force=force, jobs=jobs)
    write_report(cfg, path)
    return path


def summary_medians(rows: list[dict]) -> dict[tuple, float]:
    """Median avg_mse over seeds keyed by (method, system, fraction)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["system"], float(r["fraction"])), []).append(r["avg_mse"])
    return {k: float(np.median(v)) for k, v in groups.items()}
