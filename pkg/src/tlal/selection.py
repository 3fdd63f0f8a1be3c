"""Turning an uncertainty ranking into a subset to annotate.

Three strategies:

* ``range``: a contiguous window of the ranking, addressed in percentiles.
* ``proposed``: drop the most and least uncertain ``discard_pct`` percent,
  then draw uniformly from what is left.
* ``random``: uniform draw from the whole pool.

Boundaries use round-half-up on ``pct * n / 100`` and windows are half-open
on rank, so adjacent windows partition the pool exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Collection, Iterable, Sequence

import numpy as np

from ._util import fraction_count, pct_position
from .errors import ConfigurationError, ConsistencyError
from .uncertainty import UncertaintyRanking

STRATEGIES = ("proposed", "range", "random")


@dataclass
class SelectionResult:
    strategy: str
    selected_ids: list[str]
    parameters: dict = field(default_factory=dict)
    newly_labeled_count: int = 0
    total_label_fraction: float = 0.0
    pool_size: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if len(set(self.selected_ids)) != len(self.selected_ids):
            raise ConsistencyError("selection contains duplicate ids")

    @property
    def id_set(self) -> frozenset[str]:
        return frozenset(self.selected_ids)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "SelectionResult":
        return cls(**json.loads(Path(path).read_text()))


def labeling_cost(initial_labeled: Collection[str], selected: Collection[str], pool_size: int,
                  pool_ids: Collection[str] | None = None) -> tuple[int, float]:
    """Annotation accounting for labels already paid for plus newly selected ones.

    Returns ``(newly_labeled, total_fraction)`` with
    ``newly_labeled = |selected - initial|`` and
    ``total_fraction = |initial | selected| / pool_size``.
    """
    if pool_size <= 0:
        raise ConfigurationError("pool_size must be positive")
    initial, chosen = set(initial_labeled), set(selected)
    if pool_ids is not None:
        pool = set(pool_ids)
        stray = (initial | chosen) - pool
        if stray:
            raise ConsistencyError(f"{len(stray)} ids outside the pool, e.g. {sorted(stray)[:3]}")
    union = initial | chosen
    if len(union) > pool_size:
        raise ConsistencyError("labeled ids exceed the pool size")
    return len(chosen - initial), len(union) / pool_size


def _finish(strategy: str, selected: list[str], params: dict, pool_ids: Sequence[str],
            initial_labeled: Collection[str] | None) -> SelectionResult:
    n = len(pool_ids)
    newly, total = labeling_cost(initial_labeled or (), selected, n,
                                 pool_ids=pool_ids if initial_labeled else None)
    return SelectionResult(strategy, sorted(selected), params, newly, total, n)


def select_range(ranking: UncertaintyRanking, lo_pct: float, hi_pct: float,
                 initial_labeled: Collection[str] | None = None) -> SelectionResult:
    """Ranks ``round(lo*n/100)+1 .. round(hi*n/100)`` (1-based, inclusive)."""
    if not (0 <= lo_pct < hi_pct <= 100):
        raise ConfigurationError(f"invalid window ({lo_pct}, {hi_pct}); need 0 <= lo < hi <= 100")
    ids = ranking.sample_ids
    n = len(ids)
    start, stop = pct_position(lo_pct, n), pct_position(hi_pct, n)
    params = {"lo_pct": lo_pct, "hi_pct": hi_pct, "first_rank": start + 1, "last_rank": stop}
    return _finish("range", ids[start:stop], params, ids, initial_labeled)


def max_feasible_fraction(discard_pct: float) -> float:
    return (100 - 2 * discard_pct) / 100


def check_proposed_feasible(discard_pct: float, sample_fraction: float, n: int | None = None) -> None:
    """Raise ConfigurationError unless the middle window can supply the draw."""
    if not (0 <= discard_pct < 50):
        raise ConfigurationError(f"discard_pct must lie in [0, 50), got {discard_pct}")
    if not (0 < sample_fraction <= 1):
        raise ConfigurationError(f"sample_fraction must lie in (0, 1], got {sample_fraction}")
    limit = max_feasible_fraction(discard_pct)
    if sample_fraction > limit + 1e-12:
        raise ConfigurationError(
            f"sample_fraction {sample_fraction} infeasible with discard {discard_pct}%: "
            f"maximum feasible fraction is {limit:g}"
        )
    if n is not None:
        cut = pct_position(discard_pct, n)
        middle = pct_position(100 - discard_pct, n) - cut
        k = fraction_count(sample_fraction, n)
        if k > middle:
            raise ConfigurationError(
                f"need {k} samples but the middle window holds {middle}; "
                f"maximum feasible fraction is {middle / n:g}"
            )


def select_proposed(ranking: UncertaintyRanking, discard_pct: float = 10, sample_fraction: float = 0.30,
                    seed: int = 0, initial_labeled: Collection[str] | None = None) -> SelectionResult:
    """Discard both tails of the ranking then sample ``round(f*n)`` from the middle.

    The sample size is a fraction of the full pool, not of the middle window.
    Samples already in the initial labeled subset stay eligible.
    """
    ids = ranking.sample_ids
    n = len(ids)
    check_proposed_feasible(discard_pct, sample_fraction, n)
    lo, hi = pct_position(discard_pct, n), pct_position(100 - discard_pct, n)
    middle = ids[lo:hi]
    k = fraction_count(sample_fraction, n)
    rng = np.random.default_rng(seed)
    picked = [middle[i] for i in rng.permutation(len(middle))[:k]]
    params = {
        "discard_pct": discard_pct,
        "sample_fraction": sample_fraction,
        "seed": seed,
        "middle_first_rank": lo + 1,
        "middle_last_rank": hi,
    }
    return _finish("proposed", picked, params, ids, initial_labeled)


def uniform_subset(pool_ids: Sequence[str], fraction: float, seed: int) -> list[str]:
    if not (0 < fraction <= 1):
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    ids = list(pool_ids)
    if len(set(ids)) != len(ids):
        raise ConsistencyError("pool ids are not unique")
    k = fraction_count(fraction, len(ids))
    rng = np.random.default_rng(seed)
    return [ids[i] for i in rng.permutation(len(ids))[:k]]


def select_random(pool_ids: Sequence[str], fraction: float, seed: int,
                  initial_labeled: Collection[str] | None = None) -> SelectionResult:
    """Uniform draw of ``round(fraction * n)`` ids."""
    picked = uniform_subset(pool_ids, fraction, seed)
    return _finish("random", picked, {"fraction": fraction, "seed": seed}, list(pool_ids), initial_labeled)


def select_all(pool_ids: Iterable[str]) -> SelectionResult:
    """Whole-pool selection used by the full-data baseline."""
    ids = list(pool_ids)
    return SelectionResult("range", sorted(ids), {"lo_pct": 0, "hi_pct": 100, "baseline": True},
                           len(ids), 1.0, len(ids))
