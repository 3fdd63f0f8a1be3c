"""Committee uncertainty: per-member entropy plus symmetrised pairwise KL.

All logs are natural. Any other base rescales every score by the same
positive constant, which leaves the ranking unchanged.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ArityError, DomainError, NumericalError

EPS = 1e-12
NORM_TOL = 1e-9
N_MEMBERS = 3


def _as_distribution(p, name: str = "p") -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries: {arr}")
    if np.any(arr < 0):
        raise DomainError(f"{name} has negative entries: {arr}")
    if abs(arr.sum() - 1.0) > NORM_TOL:
        raise DomainError(f"{name} does not sum to 1 (sum={arr.sum():.12g})")
    return arr


def entropy(p) -> float:
    """Shannon entropy ``-sum p log p`` with ``0 log 0 = 0``."""
    arr = _as_distribution(p)
    nz = arr[arr > 0]
    return float(-np.sum(nz * np.log(nz)))


def kl_divergence(p, q) -> float:
    """``D(p||q) = sum p log(p/q)``; q is clamped below at ``EPS``.

    Terms with p_i = 0 contribute nothing. The result is clipped at 0 to
    absorb rounding when p and q are numerically identical.
    """
    pa = _as_distribution(p, "p")
    qa = _as_distribution(q, "q")
    if pa.shape != qa.shape:
        raise DomainError(f"dimension mismatch: {pa.shape} vs {qa.shape}")
    mask = pa > 0
    qc = np.maximum(qa[mask], EPS)
    value = float(np.sum(pa[mask] * (np.log(pa[mask]) - np.log(qc))))
    return max(value, 0.0)


def uncertainty_score(member_probs: Sequence) -> tuple[float, float, float]:
    """Return ``(entropy_sum, kl_sum, score)`` for one sample.

    entropy_sum adds the entropy of each of the three members; kl_sum adds
    D(pi||pj) + D(pj||pi) over the three unordered member pairs.
    """
    if len(member_probs) != N_MEMBERS:
        raise ArityError(f"expected {N_MEMBERS} member distributions, got {len(member_probs)}")
    h = sum(entropy(p) for p in member_probs)
    k = 0.0
    for i in range(N_MEMBERS):
        for j in range(i + 1, N_MEMBERS):
            k += kl_divergence(member_probs[i], member_probs[j])
            k += kl_divergence(member_probs[j], member_probs[i])
    return h, k, h + k


def score_tensor(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`uncertainty_score` over an ``(n, members, classes)`` array.

    Rows are renormalised in float64 first, since network softmax outputs
    are float32 and only sum to 1 within ~1e-7.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3:
        raise DomainError(f"expected (n, members, classes) array, got shape {p.shape}")
    if p.shape[1] != N_MEMBERS:
        raise ArityError(f"expected {N_MEMBERS} members, got {p.shape[1]}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError("probabilities must be finite and non-negative")
    p = p / p.sum(axis=2, keepdims=True)

    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        logq = np.log(np.maximum(p, EPS))
    entropy_sum = -plogp.sum(axis=(1, 2))

    kl_sum = np.zeros(p.shape[0])
    for i in range(N_MEMBERS):
        for j in range(i + 1, N_MEMBERS):
            for a, b in ((i, j), (j, i)):
                term = plogp[:, a, :] - np.where(p[:, a, :] > 0, p[:, a, :] * logq[:, b, :], 0.0)
                kl_sum += np.maximum(term.sum(axis=1), 0.0)
    return entropy_sum, kl_sum, entropy_sum + kl_sum


@dataclass(frozen=True)
class UncertaintyRecord:
    sample_id: str
    entropy_sum: float
    kl_sum: float
    score: float
    rank: int


@dataclass(frozen=True)
class UncertaintyRanking:
    """Records sorted by score descending, ties by ascending sample_id."""

    records: tuple[UncertaintyRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def sample_ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records])

    def scaled(self, factor: float) -> "UncertaintyRanking":
        """Ranking of the same records with every score multiplied by ``factor``."""
        if not factor > 0:
            raise DomainError("scale factor must be positive")
        return rank_pool(
            {r.sample_id: r.score * factor for r in self.records},
            components={r.sample_id: (r.entropy_sum * factor, r.kl_sum * factor) for r in self.records},
        )

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "sample_id", "entropy_sum", "kl_sum", "score"])
            for r in self.records:
                w.writerow([r.rank, r.sample_id, repr(r.entropy_sum), repr(r.kl_sum), repr(r.score)])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "UncertaintyRanking":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        records = tuple(
            UncertaintyRecord(
                sample_id=row["sample_id"],
                entropy_sum=float(row["entropy_sum"]),
                kl_sum=float(row["kl_sum"]),
                score=float(row["score"]),
                rank=int(row["rank"]),
            )
            for row in rows
        )
        return cls(records)


def rank_pool(
    scores: Mapping[str, float],
    components: Mapping[str, tuple[float, float]] | None = None,
) -> UncertaintyRanking:
    """Sort samples by descending score; equal scores fall back to sample_id.

    ``components`` optionally carries the (entropy_sum, kl_sum) pair per
    sample so it can be persisted next to the score.
    """
    if not scores:
        raise DomainError("cannot rank an empty score map")
    for sid, s in scores.items():
        if not math.isfinite(s):
            raise NumericalError(f"non-finite uncertainty score for sample {sid!r}: {s}")
    order = sorted(scores, key=lambda sid: (-scores[sid], sid))
    records = []
    for rank, sid in enumerate(order, start=1):
        h, k = components[sid] if components else (math.nan, math.nan)
        records.append(UncertaintyRecord(sid, float(h), float(k), float(scores[sid]), rank))
    return UncertaintyRanking(tuple(records))


def rank_tensor(sample_ids: Sequence[str], probs: np.ndarray) -> UncertaintyRanking:
    """Score a probability tensor and rank it in one step."""
    if len(sample_ids) != len(probs):
        raise DomainError(f"{len(sample_ids)} ids for {len(probs)} probability rows")
    h, k, s = score_tensor(probs)
    return rank_pool(
        dict(zip(sample_ids, s.tolist())),
        components={sid: (hh, kk) for sid, hh, kk in zip(sample_ids, h.tolist(), k.tolist())},
    )
