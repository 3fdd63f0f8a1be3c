"""Three finetuned members that differ only in learning rate, and pool scoring."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._util import derive_seed
from .backbone import Hyperparams, TrainedModel, build_model, finetune, predict_probs
from .errors import ConfigurationError, ConsistencyError, DivergenceError, StratificationError
from .selection import uniform_subset

LEARNING_RATES = (0.001, 0.0005, 0.0001)
INITIAL_FRACTION = 0.30
ROW_TOL = 1e-6


@dataclass
class Committee:
    members: list[TrainedModel]
    labeled_subset_ids: frozenset[str]
    seed: int

    def __post_init__(self):
        if len(self.members) != 3:
            raise ConfigurationError(f"a committee has exactly 3 members, got {len(self.members)}")
        lrs = self.learning_rates
        if len(set(lrs)) != 3:
            raise ConfigurationError(f"member learning rates must be distinct, got {lrs}")

    @property
    def learning_rates(self) -> tuple[float, ...]:
        return tuple(m.hyperparams.learning_rate for m in self.members)


@dataclass
class ProbabilityTensor:
    sample_ids: list[str]
    probs: np.ndarray  # (n_samples, 3, 2)
    learning_rates: tuple[float, ...] = LEARNING_RATES

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        if self.probs.shape != (len(self.sample_ids), 3, 2):
            raise ConsistencyError(f"probability tensor shape {self.probs.shape} does not match "
                                   f"{len(self.sample_ids)} samples x 3 members x 2 classes")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ConsistencyError("probabilities outside [0, 1]")
        if np.any(np.abs(self.probs.sum(axis=2) - 1) > ROW_TOL):
            raise ConsistencyError("probability rows do not sum to 1")

    def to_csv(self, path: str | Path) -> Path:
        """Long format: one row per (sample, member)."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "member_index", "learning_rate", "p0", "p1"])
            for sid, rows in zip(self.sample_ids, self.probs):
                for m, (p0, p1) in enumerate(rows):
                    w.writerow([sid, m, repr(self.learning_rates[m]), repr(float(p0)), repr(float(p1))])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "ProbabilityTensor":
        ids: list[str] = []
        rows: dict[str, dict[int, tuple[float, float]]] = {}
        lrs: dict[int, float] = {}
        with Path(path).open(newline="") as fh:
            for rec in csv.DictReader(fh):
                sid, m = rec["sample_id"], int(rec["member_index"])
                if sid not in rows:
                    ids.append(sid)
                    rows[sid] = {}
                rows[sid][m] = (float(rec["p0"]), float(rec["p1"]))
                lrs[m] = float(rec["learning_rate"])
        if sorted(lrs) != [0, 1, 2]:
            raise ConsistencyError(f"expected member indices 0..2, found {sorted(lrs)}")
        for sid in ids:
            if len(rows[sid]) != 3:
                raise ConsistencyError(f"sample {sid} has {len(rows[sid])} member rows")
        probs = np.array([[rows[sid][m] for m in range(3)] for sid in ids], dtype=np.float64)
        return cls(ids, probs, tuple(lrs[m] for m in range(3)))


def draw_initial_labeled_subset(pool, fraction: float = INITIAL_FRACTION, seed: int = 0) -> frozenset[str]:
    """Uniform subset of ``round(fraction * |pool|)`` ids (round half up)."""
    ids = pool.sample_ids if hasattr(pool, "sample_ids") else list(pool)
    return frozenset(uniform_subset(ids, fraction, seed))


def member_seeds(seed: int, n: int = 3) -> list[int]:
    return [derive_seed(seed, "committee", i) for i in range(n)]


def train_committee(pool, labeled_ids, val, base_hp: Hyperparams,
                    learning_rates: Sequence[float] = LEARNING_RATES, seed: int | None = None) -> Committee:
    """Finetune one backbone per learning rate on the initially labeled subset.

    Member seeds are derived from ``seed`` (default ``base_hp.seed``), so
    members differ in learning rate and in nothing the caller did not ask for.
    """
    labeled_ids = frozenset(labeled_ids)
    if not labeled_ids:
        raise ConfigurationError("labeled subset is empty")
    if len(learning_rates) != 3:
        raise ConfigurationError("committee needs exactly three learning rates")
    labeled = pool.subset(labeled_ids)
    if len(set(labeled.labels.tolist())) < 2:
        raise StratificationError("labeled subset contains a single class")
    seed = base_hp.seed if seed is None else seed
    members = []
    for lr, mseed in zip(learning_rates, member_seeds(seed)):
        hp = base_hp.replace(learning_rate=lr, seed=mseed)
        model = build_model(hp.pretrained, mseed, hp.arch)
        try:
            members.append(finetune(model, labeled, val, hp))
        except DivergenceError as exc:
            raise DivergenceError(exc.epoch, f"committee member with learning rate {lr} diverged "
                                             f"at epoch {exc.epoch}") from exc
    return Committee(members, labeled_ids, seed)


class _Unlabeled:
    """Label-free view of a sample; only the fields scoring may touch."""

    __slots__ = ("sample_id", "image")

    def __init__(self, sample):
        self.sample_id = sample.sample_id
        self.image = sample.image


def score_pool(committee: Committee, pool) -> ProbabilityTensor:
    """Forward-only class probabilities of every pool sample from every member."""
    samples = [_Unlabeled(s) for s in pool]
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConsistencyError("pool sample ids are not unique")
    stray = committee.labeled_subset_ids - set(ids)
    if stray:
        raise ConsistencyError(f"committee labeled subset has {len(stray)} ids outside this pool")
    per_member = [predict_probs(m, samples).astype(np.float64) for m in committee.members]
    probs = np.stack(per_member, axis=1)
    return ProbabilityTensor(ids, probs, committee.learning_rates)
