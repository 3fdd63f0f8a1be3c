"""Slice-level AUC, repeat-run aggregation and comparative experiments."""
from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError, ConsistencyError, StatisticsError, UndefinedMetricError

Z95 = 1.96


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ConfigurationError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.all(np.isin(y, (0, 1))):
        raise ConfigurationError("labels must be 0/1")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RunResult:
    strategy: str
    sample_fraction: float
    seed: int
    val_auc: float
    test_auc: float
    wall_time: float = 0.0

    def __post_init__(self):
        for name in ("val_auc", "test_auc"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConsistencyError(f"{name}={v} outside [0, 1]")


@dataclass
class AggregateResult:
    strategy: str
    n_runs: int
    mean_auc: float
    ci_low: float
    ci_high: float
    metric: str = "test_auc"
    sample_fraction: float | None = None
    split_id: str = ""

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2

    def formatted(self, digits: int = 2) -> str:
        """``87.46% (87.11, 87.81)`` style."""
        return (f"{100 * self.mean_auc:.{digits}f}% "
                f"({100 * self.ci_low:.{digits}f}, {100 * self.ci_high:.{digits}f})")


def aggregate_runs(results: Sequence[RunResult], metric: str = "test_auc", split_id: str = "") -> AggregateResult:
    """Mean with a normal-approximation 95% CI, ``mean +- 1.96 s / sqrt(n)``.

    ``s`` is the sample standard deviation (n-1 denominator). Values are
    accumulated exactly, so the result does not depend on input order.
    """
    if len(results) < 2:
        raise StatisticsError(f"need at least 2 runs to aggregate, got {len(results)}")
    strategies = {r.strategy for r in results}
    if len(strategies) != 1:
        raise ConsistencyError(f"mixed strategies in one aggregate: {sorted(strategies)}")
    values = [float(getattr(r, metric)) for r in results]
    n = len(values)
    # exact rational arithmetic: order-independent and exact for constant inputs
    mean = statistics.mean(values)
    s = statistics.stdev(values, mean)
    half = Z95 * s / math.sqrt(n)
    fractions = {r.sample_fraction for r in results}
    return AggregateResult(
        strategy=results[0].strategy, n_runs=n, mean_auc=mean, ci_low=mean - half, ci_high=mean + half,
        metric=metric, sample_fraction=fractions.pop() if len(fractions) == 1 else None, split_id=split_id,
    )


@dataclass
class Comparison:
    a: str
    b: str
    difference_points: float  # a - b, in AUC percentage points
    cis_overlap: bool


def compare_strategies(a: AggregateResult, b: AggregateResult) -> Comparison:
    if a.split_id != b.split_id or a.metric != b.metric:
        raise ConsistencyError(f"aggregates computed on different splits/metrics: "
                               f"({a.split_id!r}, {a.metric}) vs ({b.split_id!r}, {b.metric})")
    diff = 100.0 * (a.mean_auc - b.mean_auc)
    overlap = a.ci_low <= b.ci_high and b.ci_low <= a.ci_high
    return Comparison(a.strategy, b.strategy, diff, overlap)


# ---------------------------------------------------------------- ledgers

class ResultsLedger:
    """Append-only CSV of per-run results."""

    COLUMNS = [f.name for f in fields(RunResult)]

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, result: RunResult) -> None:
        with self.path.open("a", newline="") as fh:
            row = asdict(result)
            csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in row.values()])

    def read(self) -> list[RunResult]:
        return read_results(self.path)


def read_results(path: str | Path) -> list[RunResult]:
    with Path(path).open(newline="") as fh:
        return [
            RunResult(row["strategy"], float(row["sample_fraction"]), int(row["seed"]),
                      float(row["val_auc"]), float(row["test_auc"]), float(row["wall_time"]))
            for row in csv.DictReader(fh)
        ]


def group_results(results: Iterable[RunResult]) -> dict[tuple[str, float], list[RunResult]]:
    groups: dict[tuple[str, float], list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.strategy, r.sample_fraction), []).append(r)
    return groups


# ---------------------------------------------------------------- experiments

def run_strategy(strategy: str, pool, val, test, ranking, fraction: float, seed: int, hp,
                 discard_pct: float = 10, window: tuple[float, float] | None = None,
                 initial_labeled=None):
    """One select -> finetune -> evaluate cycle.

    ``strategy`` is one of ``baseline`` (whole pool), ``baseline_scratch``
    (whole pool, random init), ``proposed``, ``random`` or ``range``.
    Returns ``(RunResult, SelectionResult, TrainedModel)``.
    """
    from .backbone import build_model, finetune, predict_probs
    from .selection import select_all, select_proposed, select_random, select_range

    t0 = time.perf_counter()
    if strategy in ("baseline", "baseline_scratch"):
        sel = select_all(pool.sample_ids)
        fraction = 1.0
    elif strategy == "proposed":
        sel = select_proposed(ranking, discard_pct, fraction, seed, initial_labeled)
    elif strategy == "random":
        sel = select_random(pool.sample_ids, fraction, seed, initial_labeled)
    elif strategy == "range":
        if window is None:
            raise ConfigurationError("range strategy needs a (lo_pct, hi_pct) window")
        sel = select_range(ranking, *window, initial_labeled=initial_labeled)
        fraction = len(sel.selected_ids) / len(pool)
    else:
        raise ConfigurationError(f"unknown strategy {strategy!r}")

    run_hp = hp.replace(seed=seed)
    if strategy == "baseline_scratch":
        run_hp = run_hp.replace(pretrained=False)
    model = build_model(run_hp.pretrained, seed, run_hp.arch)
    trained = finetune(model, pool.subset(sel.selected_ids), val, run_hp)
    test_auc = auc(predict_probs(trained, list(test))[:, 1], test.labels)
    label = strategy if strategy != "range" else f"range_{window[0]:g}_{window[1]:g}"
    result = RunResult(label, fraction, seed, trained.best_val_auc, test_auc, time.perf_counter() - t0)
    return result, sel, trained


def sweep_sample_size(pool, val, test, ranking, fractions: Sequence[float], strategies: Sequence[str],
                      n_runs: int, seeds: Sequence[int], hp, discard_pct: float = 10,
                      on_run: Callable | None = None, split_id: str = "") -> list[AggregateResult]:
    """Learning curves: every fraction x strategy, ``n_runs`` seeds each.

    ``uncertainty`` draws from the middle window (tails of ``discard_pct``
    removed); ``random`` draws from the whole pool. ``on_run`` is called
    with ``(RunResult, SelectionResult)`` after each run.
    """
    from .selection import check_proposed_feasible

    if len(seeds) < n_runs:
        raise ConfigurationError(f"{n_runs} runs requested but only {len(seeds)} seeds")
    for s in strategies:
        if s not in ("uncertainty", "random"):
            raise ConfigurationError(f"sweep strategy must be 'uncertainty' or 'random', got {s!r}")
    for f in fractions:
        if not 0 < f <= 1:
            raise ConfigurationError(f"fraction {f} outside (0, 1]")
        if "uncertainty" in strategies:
            check_proposed_feasible(discard_pct, f, len(pool))

    out = []
    for f in fractions:
        for s in strategies:
            runs = []
            for seed in seeds[:n_runs]:
                result, sel, _ = run_strategy("proposed" if s == "uncertainty" else "random",
                                              pool, val, test, ranking, f, seed, hp, discard_pct)
                result.strategy = s
                runs.append(result)
                if on_run:
                    on_run(result, sel)
            out.append(aggregate_runs(runs, "test_auc", split_id))
    return out
