"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

Criteria 4 to 7 share one full default-config grid run (3 systems, 2 methods,
3 fractions, 3 seeds), which takes roughly half an hour on one CPU core.
"""

import time

import numpy as np
import pytest
import yaml

from physrep import pipeline
from physrep.config import load_config, pretrain_config
from physrep.probe import read_results
from physrep.report import trend_flags
from physrep.selftest import run_selftest
from physrep.simulate import check_manifest, load_split
from physrep.ssl import VicregWeights, embedding_std, pretrain

from conftest import TINY_RUN

GRID_BUDGET_S = 60 * 60
COLLAPSE_BUDGET_S = 5 * 60
TOL = 0.02


def announce(capsys, number: int, passed: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def full_grid(tmp_path_factory):
    cfg = load_config(None, [f"out={tmp_path_factory.mktemp('grid')}"], environ={})
    t0 = time.perf_counter()
    csv_path = pipeline.run_all(cfg)
    seconds = time.perf_counter() - t0
    rows = read_results(csv_path)
    return cfg, rows, pipeline.summary_medians(rows), seconds


def _check_group(capsys, number, kind, tol, budget=None):
    t0 = time.perf_counter()
    results = run_selftest([kind])
    seconds = time.perf_counter() - t0
    failed = [r.line() for r in results if not r.passed or not r.error < tol]
    worst = max(results, key=lambda r: r.error)
    ok = bool(results) and not failed and (budget is None or seconds < budget)
    timing = f" in {seconds:.1f}s (budget {budget}s)" if budget else ""
    announce(capsys, number, ok, f"{len(results)} {kind} checks, worst {worst.name}={worst.error:.2e}{timing}")
    assert results and not failed, failed
    if budget is not None:
        assert seconds < budget


def test_criterion_1_gradient_checks(capsys):
    _check_group(capsys, 1, "gradcheck", 1e-4, budget=60)


def test_criterion_2_loss_oracles(capsys):
    results = {r.name: r for r in run_selftest(["loss"])}
    worked = results["vicreg_worked_examples"].error
    brute = max(results["vicreg_bruteforce"].error, results["mae_bruteforce"].error)
    ok = worked < 1e-12 and brute < 1e-10
    announce(capsys, 2, ok, f"worked examples 0/39.6/79.2 err={worked:.1e}; brute force (100 instances each) err={brute:.1e}")
    assert worked < 1e-12
    assert brute < 1e-10


def test_criterion_3_simulator_oracles(capsys):
    r = {c.name: c.error for c in run_selftest(["simulator"])}
    ok = r["advdiff_mass"] < 1e-8 and r["grayscott_fixed_point"] == 0.0 and r["taylor_green"] < 0.01
    announce(capsys, 3, ok, f"mass drift {r['advdiff_mass']:.1e}, Gray-Scott drift {r['grayscott_fixed_point']:.1e}, "
                            f"Taylor-Green rel dev {r['taylor_green']:.1e}")
    assert r["advdiff_mass"] < 1e-8
    assert r["grayscott_fixed_point"] == 0.0
    assert r["taylor_green"] < 0.01


@pytest.mark.slow
def test_criterion_4_collapse_dichotomy(full_grid, tmp_path, capsys):
    cfg = full_grid[0]
    directory = pipeline.data_dir(cfg, "advdiff")
    frames, _ = load_split(directory, "pretrain", check_manifest(directory))
    k = cfg["pretrain"]["context_frames"]
    probe_clips = np.ascontiguousarray(frames[:128, :k].transpose(0, 2, 1, 3, 4), dtype=np.float64)
    base = pretrain_config(cfg, "jepa")
    out = {}
    for label, weights in (("ablated", VicregWeights(mu=0.0, nu=0.0)), ("default", VicregWeights())):
        run_cfg = type(base)(**{**base.__dict__, "vicreg": weights})
        t0 = time.perf_counter()
        res = pretrain("jepa", frames, run_cfg, cfg["seed"], tmp_path, tag=label, resume=False)
        out[label] = (embedding_std(res.model.encoder, probe_clips), time.perf_counter() - t0)
    (std0, t_ablated), (std1, t_default) = out["ablated"], out["default"]
    ok = std0 < 0.05 and std1 >= 0.5 and max(t_ablated, t_default) < COLLAPSE_BUDGET_S
    announce(capsys, 4, ok, f"mu=nu=0 std={std0:.4f} ({t_ablated:.0f}s); defaults std={std1:.3f} ({t_default:.0f}s)")
    assert std0 < 0.05
    assert std1 >= 0.5
    assert t_ablated < COLLAPSE_BUDGET_S and t_default < COLLAPSE_BUDGET_S


@pytest.mark.slow
def test_criterion_5_jepa_probe_beats_chance(full_grid, capsys):
    cfg, rows, med, seconds = full_grid
    seeds = {r["seed"] for r in rows}
    jepa = {s: med[("jepa", s, 1.0)] for s in cfg["dataset"]["systems"]}
    ok = len(seeds) >= 3 and all(v < 0.8 for v in jepa.values()) and seconds < GRID_BUDGET_S
    detail = ", ".join(f"{s}={v:.3f}" for s, v in jepa.items())
    announce(capsys, 5, ok, f"JEPA median MSE over {len(seeds)} seeds: {detail}; grid {seconds / 60:.1f} min")
    assert len(seeds) >= 3
    assert all(v < 0.8 for v in jepa.values()), jepa
    assert seconds < GRID_BUDGET_S


@pytest.mark.slow
def test_criterion_6_jepa_vs_mae_trend(full_grid, capsys):
    cfg, _, med, _ = full_grid
    flags = trend_flags(med, TOL)
    wins = sum(flags.method_wins.values())
    report = (pipeline.out_dir(cfg) / "report.md").read_text()
    flagged = all(f"{s}: jepa <= mae REVERSED" in report for s in flags.reversals)
    detail = ", ".join(f"{s} jepa={med[('jepa', s, 1.0)]:.3f} mae={med[('mae', s, 1.0)]:.3f}" for s in flags.method_wins)
    announce(capsys, 6, wins >= 2 and flagged,
             f"JEPA <= MAE on {wins}/3 ({detail}); reversals flagged: {flags.reversals or 'none'}")
    assert wins >= 2
    assert flagged


@pytest.mark.slow
def test_criterion_7_data_fraction_monotone(full_grid, capsys):
    cfg, _, med, _ = full_grid
    system = cfg["report"]["scaling_system"]
    fractions = sorted(cfg["probe"]["fractions"])
    flags = trend_flags(med, TOL)
    curves = {m: [med[(m, system, f)] for f in fractions] for m in cfg["pretrain"]["methods"]}
    ok = all(flags.monotone[(m, system)] for m in curves)
    detail = "; ".join(f"{m} " + " -> ".join(f"{v:.3f}" for v in c) for m, c in curves.items())
    others = [f"{m}/{s}" for (m, s), good in flags.monotone.items() if s != system and not good]
    announce(capsys, 7, ok, f"{system} {detail} (tol {TOL}); other systems non-monotone: {others or 'none'}")
    for m, curve in curves.items():
        assert all(b <= a + TOL for a, b in zip(curve, curve[1:])), (m, curve)


def test_criterion_8_determinism(tmp_path, capsys):
    outputs = []
    for name in ("first", "second"):
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump(dict(TINY_RUN, out=str(tmp_path / name))))
        cfg = load_config(path, environ={})
        outputs.append(pipeline.run_all(cfg).read_bytes())
    same = outputs[0] == outputs[1]
    rows = len(outputs[0].splitlines()) - 1
    announce(capsys, 8, same, f"two clean runs, {rows} result rows, byte-identical CSV: {same}")
    assert same
