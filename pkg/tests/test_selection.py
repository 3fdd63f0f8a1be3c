import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from tlal.errors import ConfigurationError, ConsistencyError
from tlal.selection import (
    SelectionResult,
    check_proposed_feasible,
    labeling_cost,
    select_proposed,
    select_random,
    select_range,
)
from tlal.uncertainty import rank_pool


def make_ranking(n, seed=0):
    rng = np.random.default_rng(seed)
    return rank_pool({f"s{i:05d}": float(v) for i, v in enumerate(rng.uniform(size=n))})


def half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


POOL = make_ranking(4060)
IDS = POOL.sample_ids


def test_window_10_40():
    sel = select_range(POOL, 10, 40)
    assert len(sel.selected_ids) == 1218
    assert (sel.parameters["first_rank"], sel.parameters["last_rank"]) == (407, 1624)
    assert sel.id_set == set(IDS[406:1624])


def test_window_partition():
    assert select_range(POOL, 0, 100).id_set == set(IDS)
    a, b = select_range(POOL, 0, 50).id_set, select_range(POOL, 50, 100).id_set
    assert not a & b and a | b == set(IDS)


@pytest.mark.parametrize("lo,hi", [(40, 10), (-1, 20), (0, 101), (30, 30)])
def test_window_bounds_rejected(lo, hi):
    with pytest.raises(ConfigurationError):
        select_range(POOL, lo, hi)


def test_proposed_defaults():
    sel = select_proposed(POOL, seed=0)
    assert len(sel.selected_ids) == 1218
    ranks = {sid: i + 1 for i, sid in enumerate(IDS)}
    assert all(406 < ranks[s] <= 3654 for s in sel.selected_ids)
    assert select_proposed(POOL, seed=0).selected_ids == sel.selected_ids
    assert select_proposed(POOL, seed=1).selected_ids != sel.selected_ids


def test_proposed_exhaustive_middle():
    a = select_proposed(POOL, 10, 0.80, seed=0)
    b = select_proposed(POOL, 10, 0.80, seed=99)
    assert a.id_set == b.id_set == set(IDS[406:3654])


def test_proposed_infeasible_names_maximum():
    with pytest.raises(ConfigurationError, match="maximum feasible fraction is 0.8"):
        select_proposed(POOL, 10, 0.9)
    with pytest.raises(ConfigurationError):
        check_proposed_feasible(30, 0.5)


def test_proposed_inclusion_frequency():
    # each middle sample is picked with probability 1218/3248 per seed
    n_seeds = 50
    counts = dict.fromkeys(IDS[406:3654], 0)
    for seed in range(n_seeds):
        for sid in select_proposed(POOL, seed=seed).selected_ids:
            counts[sid] += 1
    p = 1218 / 3248
    freq = np.array(list(counts.values())) / n_seeds
    assert abs(freq.mean() - p) < 1e-12  # exact: every draw has exactly 1218 ids
    sigma = math.sqrt(p * (1 - p) / n_seeds)
    # per-sample binomial tolerance; 4 sigma over 3248 samples leaves a few expected excursions
    assert np.mean(np.abs(freq - p) > 4 * sigma) < 0.005


def test_random_sizes_and_determinism():
    assert len(select_random(IDS, 0.10, 0).selected_ids) == 406
    assert select_random(IDS, 1.0, 3).id_set == set(IDS)
    assert select_random(IDS, 0.3, 5).selected_ids == select_random(IDS, 0.3, 5).selected_ids
    for bad in (0, -0.1, 1.5):
        with pytest.raises(ConfigurationError):
            select_random(IDS, bad, 0)


def test_random_class_proportions_hypergeometric():
    n, k_pos = 4060, 1000
    positive = set(IDS[:k_pos])
    draw = 2030
    mean = draw * k_pos / n
    sd = math.sqrt(draw * (k_pos / n) * (1 - k_pos / n) * (n - draw) / (n - 1))
    for seed in range(20):
        hits = len(select_random(IDS, 0.5, seed).id_set & positive)
        assert abs(hits - mean) < 4 * sd


def test_labeling_cost_examples():
    ids = [f"x{i}" for i in range(100)]
    a, b = ids[:30], ids[30:60]
    assert labeling_cost(a, b, 100) == (30, 0.60)
    assert labeling_cost(a, a, 100) == (0, 0.30)
    assert labeling_cost(a, ids[15:45], 100) == (15, 0.45)
    with pytest.raises(ConsistencyError):
        labeling_cost(a, ["stranger"], 100, pool_ids=ids)


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 600), st.integers(0, 2**31), st.floats(0.01, 0.8), st.floats(0.1, 1e6))
@example(326, 0, 0.8, 1.0)
def test_selection_properties(n, seed, fraction, factor):
    ranking = make_ranking(n, seed % 1000)
    initial = select_random(ranking.sample_ids, 0.30, seed + 1).selected_ids
    lo, hi = half_up(Fraction(n, 10)), half_up(Fraction(9 * n, 10))
    want = half_up(Fraction(repr(fraction)) * n)
    if want > hi - lo:
        # rounding can leave the middle one short near the 0.8 limit (e.g. n=326)
        with pytest.raises(ConfigurationError, match="maximum feasible fraction"):
            select_proposed(ranking, 10, fraction, seed, initial)
        return
    sel = select_proposed(ranking, 10, fraction, seed, initial)
    k = len(sel.selected_ids)
    assert k == want
    tails = set(ranking.sample_ids[:lo]) | set(ranking.sample_ids[hi:])
    assert not sel.id_set & tails
    scaled = ranking.scaled(factor)
    assert select_proposed(scaled, 10, fraction, seed, initial).selected_ids == sel.selected_ids
    assert select_range(scaled, 20, 55).selected_ids == select_range(ranking, 20, 55).selected_ids
    init_frac = len(initial) / n
    assert max(init_frac, k / n) - 1e-12 <= sel.total_label_fraction <= min(1, init_frac + k / n) + 1e-12


def test_json_roundtrip(tmp_path):
    sel = select_proposed(POOL, seed=4, initial_labeled=IDS[:1218])
    back = SelectionResult.from_json(sel.to_json(tmp_path / "s.json"))
    assert back == sel
    assert back.pool_size == 4060
