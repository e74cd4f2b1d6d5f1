"""Markdown and CSV summary tables built from the results CSV alone (no training)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .pipeline import out_dir, summary_medians
from .probe import TARGET_CONVENTION, read_results


@dataclass
class TrendFlags:
    method_wins: dict[str, bool]  # system -> jepa <= mae
    monotone: dict[tuple[str, str], bool]  # (method, system) -> non-increasing within tolerance

    @property
    def reversals(self) -> list[str]:
        return [s for s, ok in self.method_wins.items() if not ok]


def trend_flags(medians: dict[tuple, float], tolerance: float) -> TrendFlags:
    systems = sorted({k[1] for k in medians})
    methods = sorted({k[0] for k in medians})
    wins = {}
    for s in systems:
        full = {m: medians.get((m, s, 1.0)) for m in ("jepa", "mae")}
        if None not in full.values():
            wins[s] = full["jepa"] <= full["mae"]
    mono = {}
    for m in methods:
        for s in systems:
            fr = sorted(f for (mm, ss, f) in medians if mm == m and ss == s)
            vals = [medians[(m, s, f)] for f in fr]
            mono[(m, s)] = all(vals[i + 1] <= vals[i] + tolerance for i in range(len(vals) - 1))
    return TrendFlags(wins, mono)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def render(rows: list[dict], tolerance: float = 0.02, scaling_system: str = "shearvort") -> tuple[str, list[list]]:
    med = summary_medians(rows)
    systems = sorted({r["system"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    fractions = sorted({float(r["fraction"]) for r in rows})
    seeds = sorted({r["seed"] for r in rows})
    flags = trend_flags(med, tolerance)
    table_rows = [["table", "method", "system", "fraction", "median_avg_mse"]]
    lines = [
        "# Parameter prediction summary",
        "",
        f"Values are medians over seeds {seeds} of the averaged {TARGET_CONVENTION}.",
        "",
        "## Methods by system (fraction 1.0)",
        "",
        "| method | " + " | ".join(systems) + " |",
        "|---|" + "---|" * len(systems),
    ]
    for m in methods:
        vals = [med.get((m, s, 1.0)) for s in systems]
        lines.append(f"| {m} | " + " | ".join(_fmt(v) for v in vals) + " |")
        table_rows += [["by_system", m, s, 1.0, v] for s, v in zip(systems, vals) if v is not None]
    lines += ["", f"## Fine-tuning fraction on {scaling_system}", ""]
    lines += ["| method | " + " | ".join(f"{int(round(f * 100))}%" for f in fractions) + " |",
              "|---|" + "---|" * len(fractions)]
    for m in methods:
        vals = [med.get((m, scaling_system, f)) for f in fractions]
        lines.append(f"| {m} | " + " | ".join(_fmt(v) for v in vals) + " |")
    for m in methods:
        for s in systems:
            table_rows += [["by_fraction", m, s, f, med[(m, s, f)]] for f in fractions if (m, s, f) in med]
    lines += ["", "## Trend checks", ""]
    for s, ok in sorted(flags.method_wins.items()):
        lines.append(f"- {s}: jepa <= mae {'holds' if ok else 'REVERSED'}")
    for (m, s), ok in sorted(flags.monotone.items()):
        lines.append(f"- {m}/{s}: error non-increasing with data (tol {tolerance}) {'holds' if ok else 'VIOLATED'}")
    if flags.reversals:
        lines.append("")
        lines.append(f"Reversal flagged on: {', '.join(flags.reversals)}")
    return "\n".join(lines) + "\n", table_rows


def write_report(cfg: dict, results_csv=None) -> Path:
    results_csv = Path(results_csv) if results_csv else out_dir(cfg) / "results.csv"
    rows = read_results(results_csv)
    text, table = render(rows, cfg["report"]["tolerance"], cfg["report"]["scaling_system"])
    md = out_dir(cfg) / "report.md"
    md.write_text(text)
    with open(out_dir(cfg) / "summary.csv", "w", newline="") as f:
        csv.writer(f).writerows(table)
    return md
