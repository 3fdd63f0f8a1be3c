"""Figures and table analogues from a finished run's artifacts.

Every plot is written as SVG plus a PNG fallback. Tables are written as
aligned text and CSV.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._util import fraction_count  # noqa: E402
from .errors import ReportError  # noqa: E402
from .evaluation import AggregateResult, aggregate_runs, group_results, read_results  # noqa: E402
from .uncertainty import UncertaintyRanking  # noqa: E402

KINDS = ("distribution", "range", "comparison", "sweep", "tables")
SWEEP_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


def _save(fig, out_dir: Path, stem: str) -> list[Path]:
    paths = [out_dir / f"{stem}.svg", out_dir / f"{stem}.png"]
    fig.savefig(paths[0])
    fig.savefig(paths[1], dpi=120)
    plt.close(fig)
    return paths


def _require(manifest, key: str, stage: str, kind: str) -> Path:
    if not manifest.has(key):
        raise ReportError(f"report '{kind}' needs the '{key}' artifact; run the '{stage}' stage first")
    return manifest.path(key)


def _results(manifest, kind: str):
    return read_results(_require(manifest, "results", "runs", kind))


def _agg(runs, metric: str) -> AggregateResult | None:
    return aggregate_runs(runs, metric) if len(runs) >= 2 else None


def plot_distribution(ranking: UncertaintyRanking, out_dir: Path, pool_order: list[str] | None = None) -> list[Path]:
    """Uncertainty scores in pool order and sorted descending, one file per view."""
    by_id = {r.sample_id: r.score for r in ranking}
    order = pool_order or sorted(by_id)
    paths = []
    for stem, values, title in (
        ("distribution_unsorted", [by_id[s] for s in order], "uncertainty score (pool order)"),
        ("distribution_sorted", ranking.scores, "uncertainty score (sorted, descending)"),
    ):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.plot(np.arange(1, len(values) + 1), values, lw=0.8)
        ax.set_xlabel("sample" if "unsorted" in stem else "rank")
        ax.set_ylabel("score")
        ax.set_title(title)
        fig.tight_layout()
        paths += _save(fig, out_dir, stem)
    return paths


def plot_range_sweep(results, out_dir: Path) -> list[Path]:
    groups = {k[0]: v for k, v in group_results(results).items() if k[0].startswith("range_")}
    if not groups:
        raise ReportError("report 'range' needs range-window runs (selection.range_windows)")

    def lo(name):
        return float(name.split("_")[1])

    names = sorted(groups, key=lo)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for metric, marker in (("val_auc", "o"), ("test_auc", "s")):
        means = [np.mean([getattr(r, metric) for r in groups[n]]) for n in names]
        ax.plot(range(len(names)), means, marker=marker, label=metric.replace("_", " "))
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels([f"{n.split('_')[1]}-{n.split('_')[2]}%" for n in names], rotation=30)
    ax.set_ylabel("AUC")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir, "range_sweep")


def plot_comparison(results, out_dir: Path, strategies=("proposed", "baseline", "random")) -> list[Path]:
    groups = {k[0]: v for k, v in group_results(results).items()}
    present = [s for s in strategies if s in groups and len(groups[s]) >= 2]
    if len(present) < 2 or "proposed" not in present:
        raise ReportError("report 'comparison' needs at least 'proposed' and one other strategy with >= 2 runs")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / len(present)
    for i, s in enumerate(present):
        aggs = [aggregate_runs(groups[s], m) for m in ("val_auc", "test_auc")]
        x = np.arange(2) + i * width
        ax.bar(x, [a.mean_auc for a in aggs], width, yerr=[a.half_width for a in aggs], capsize=4, label=s)
    ax.set_xticks(np.arange(2) + width * (len(present) - 1) / 2)
    ax.set_xticklabels(["validation", "test"])
    ax.set_ylabel("AUC (mean, 95% CI)")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir, "comparison")


def plot_sample_size(results, out_dir: Path) -> list[Path]:
    groups = group_results(results)
    curves = {}
    for (strategy, frac), runs in groups.items():
        if strategy.startswith("sweep_"):
            curves.setdefault(strategy[len("sweep_"):], []).append((frac, np.mean([r.test_auc for r in runs])))
    if not curves:
        raise ReportError("report 'sweep' needs sample-size sweep runs; run the 'sweep' stage first")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, style in (("uncertainty", "-"), ("random", "-.")):
        if name in curves:
            pts = sorted(curves[name])
            ax.plot([100 * f for f, _ in pts], [m for _, m in pts], style, marker="o", label=name)
    base = [r.test_auc for (s, _), runs in groups.items() if s == "baseline" for r in runs]
    if base:
        ax.axhline(np.mean(base), ls=":", color="k", label="baseline")
    ax.set_xlabel("sample size (% of training pool)")
    ax.set_ylabel("test AUC")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir, "sample_size")


def counts_table(pool_size: int, fractions=SWEEP_FRACTIONS) -> list[int]:
    return [fraction_count(f, pool_size) for f in fractions]


def _write_table(out_dir: Path, stem: str, header: list[str], rows: list[list[str]]) -> list[Path]:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    txt, csv_path = out_dir / f"{stem}.txt", out_dir / f"{stem}.csv"
    txt.write_text("\n".join(lines) + "\n")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return [txt, csv_path]


def write_tables(results, pool_size: int, out_dir: Path) -> list[Path]:
    paths = _write_table(out_dir, "table_counts", ["proportion"] + [f"{int(f * 100)}%" for f in SWEEP_FRACTIONS],
                         [["examples"] + [str(c) for c in counts_table(pool_size)]])
    groups = {k[0]: v for k, v in group_results(results or []).items()}

    def column(strategy):
        runs = groups.get(strategy, [])
        return [a.formatted() if (a := _agg(runs, m)) else "n/a" for m in ("val_auc", "test_auc")]

    if "baseline" in groups and "baseline_scratch" in groups:
        p, s = column("baseline"), column("baseline_scratch")
        paths += _write_table(out_dir, "table_transfer", ["AUC (95%CI)", "pretrained", "from scratch"],
                              [["validation", p[0], s[0]], ["test", p[1], s[1]]])
    if "proposed" in groups and "baseline" in groups:
        p, b = column("proposed"), column("baseline")
        rows = [["validation", p[0], b[0]], ["test", p[1], b[1]]]
        header = ["AUC (95%CI)", "proposed", "baseline"]
        if "random" in groups:
            r = column("random")
            header.append("random")
            rows[0].append(r[0])
            rows[1].append(r[1])
        paths += _write_table(out_dir, "table_proposed_vs_baseline", header, rows)
    return paths


def emit_reports(manifest, kinds, out_dir: str | Path | None = None) -> list[Path]:
    """Write the requested report kinds; raises ReportError on missing prerequisites."""
    kinds = set(kinds)
    unknown = kinds - set(KINDS)
    if unknown:
        raise ReportError(f"unknown report kinds {sorted(unknown)}; choose from {KINDS}")
    out = Path(out_dir) if out_dir else manifest.root / "reports"
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    if "distribution" in kinds:
        ranking = UncertaintyRanking.from_csv(_require(manifest, "ranking", "rank", "distribution"))
        pool_order = None
        if manifest.has("probs"):
            with manifest.path("probs").open(newline="") as fh:
                pool_order = list(dict.fromkeys(row["sample_id"] for row in csv.DictReader(fh)))
        paths += plot_distribution(ranking, out, pool_order)
    if "range" in kinds:
        paths += plot_range_sweep(_results(manifest, "range"), out)
    if "comparison" in kinds:
        paths += plot_comparison(_results(manifest, "comparison"), out)
    if "sweep" in kinds:
        paths += plot_sample_size(_results(manifest, "sweep"), out)
    if "tables" in kinds:
        pool_size = _pool_size(manifest)
        results = read_results(manifest.path("results")) if manifest.has("results") else []
        paths += write_tables(results, pool_size, out)
    return paths


def _pool_size(manifest) -> int:
    path = _require(manifest, "dataset", "dataset", "tables")
    with path.open() as fh:
        records = (json.loads(line) for line in fh)
        return sum(1 for r in records if r.get("split") == "train")
