"""Small helpers: deterministic seed derivation and rounding."""
from __future__ import annotations

import hashlib
import math
from decimal import ROUND_HALF_UP, Decimal


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    """Stable 32-bit seed from (master seed, stage name, index).

    Hash based, so adding runs or stages never perturbs existing ones.
    """
    digest = hashlib.sha256(f"{master}:{stage}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def round_half_up(x: float) -> int:
    # go through the decimal repr so 0.3 * 4060 lands on 1218, not 1217.999...
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def fraction_count(fraction: float, n: int) -> int:
    """round-half-up of ``fraction * n`` computed in exact decimal arithmetic."""
    if not math.isfinite(fraction):
        raise ValueError(f"fraction must be finite, got {fraction}")
    value = Decimal(repr(float(fraction))) * n
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def pct_position(pct: float, n: int) -> int:
    """Rank position for a percentile boundary: round-half-up of pct*n/100."""
    value = Decimal(repr(float(pct))) * n / 100
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))
