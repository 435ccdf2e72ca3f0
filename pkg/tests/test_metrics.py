import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fairpath import metrics as M


def test_constant_predictor_has_no_gap():
    assert M.delta_dp(np.full(6, 0.4), [0, 0, 0, 1, 1, 1]) == 0.0


def test_group_means_point_seven_and_point_four():
    s = [0.6, 0.8, 0.4, 0.4]
    assert M.delta_dp(s, [0, 0, 1, 1]) == pytest.approx(0.3, abs=1e-15)


def test_dp_direct_mean_oracle():
    assert M.delta_dp([1, 0, 1, 0, 0], [0, 0, 0, 1, 1]) == pytest.approx(2 / 3, abs=1e-15)


def test_empty_group_raises():
    with pytest.raises(M.EmptyGroupError):
        M.delta_dp([0.1, 0.2], [0, 0])
    with pytest.raises(M.EmptyGroupError):
        M.delta_eo([0.1, 0.2, 0.3], [0, 1, 1], [0, 0, 1])


def test_label_only_predictor_has_no_eo_gap():
    y = np.array([0, 1, 0, 1, 1, 0])
    a = np.array([0, 0, 1, 1, 0, 1])
    assert M.delta_eo(0.2 + 0.5 * y, y, a) == 0.0


def test_eo_sums_per_label_gaps():
    # y=0 gap 0.1, y=1 gap 0.3
    s = [0.2, 0.3, 0.7, 0.4]
    y = [0, 0, 1, 1]
    a = [0, 1, 0, 1]
    assert M.delta_eo(s, y, a) == pytest.approx(0.4, abs=1e-15)


def test_eo_direct_mean_oracle():
    s = [0.2, 0.5, 0.9, 0.6]
    assert M.delta_eo(s, [0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.6, abs=1e-15)


def test_thresholded_constant_predictor():
    assert M.mean_thresholded_dp(np.full(10, 0.6), [0] * 5 + [1] * 5) == 0.0


def threshold_construction(exact=False):
    """Group 0: f = 1 on 60%, 0 on 40%; group 1: f = 0.6 everywhere."""
    six = Fraction(6, 10) if exact else 0.6
    scores = [1] * 6 + [0] * 4 + [six] * 10
    return (scores if exact else np.array(scores, dtype=float)), np.repeat([0, 1], 10)


def threshold_oracle(scores, a, thresholds):
    total = Fraction(0)
    for t in thresholds:
        rates = []
        for g in (0, 1):
            grp = [s for s, ai in zip(scores, a) if ai == g]
            rates.append(Fraction(sum(1 for s in grp if s >= t), len(grp)))
        total += abs(rates[0] - rates[1])
    return total / len(thresholds)


def test_threshold_construction_is_seven_fifteenths():
    exact = threshold_oracle(*threshold_construction(exact=True), [Fraction(k, 10) for k in range(1, 10)])
    s, a = threshold_construction()
    assert exact == Fraction(7, 15)
    assert M.mean_thresholded_dp(s, a) == float(exact)


def test_threshold_construction_relaxed_gap_is_zero():
    s, a = threshold_construction()
    assert M.delta_dp(s, a) == 0.0


@pytest.mark.parametrize("bad", [[], [0.5, 0.5], [0.0, 0.5], [0.5, 1.0], [0.7, 0.3]])
def test_invalid_thresholds_raise(bad):
    with pytest.raises(ValueError):
        M.mean_thresholded_dp([0.1, 0.9], [0, 1], bad)


def ap_oracle(scores, labels):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    precisions, hits = [], 0
    for rank, i in enumerate(ranked, start=1):
        if labels[i]:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / len(precisions), sum(Fraction(p) for p in precisions) / len(precisions)


def test_ap_perfect_ranking():
    assert M.average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_ap_hand_value():
    assert M.average_precision([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)


def test_ap_all_positive():
    assert M.average_precision([0.1, 0.5, 0.3], [1, 1, 1]) == 1.0


def test_ap_no_positive_raises():
    with pytest.raises(ValueError):
        M.average_precision([0.1, 0.5], [0, 0])


def test_ap_ties_keep_original_order():
    # tie between the negative at index 0 and the positive at index 1: negative ranks first
    assert M.average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert M.average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_ap_matches_enumeration_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        scores = np.round(rng.random(n), 1)  # coarse values force ties
        labels = rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        as_float, exact = ap_oracle(list(scores), list(labels))
        got = M.average_precision(scores, labels)
        assert got == as_float
        assert abs(Fraction(got) - exact) <= Fraction(1, 10**14)


perm_case = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 1), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.randoms(use_true_random=False)))


@given(perm_case)
def test_gaps_invariant_to_within_group_permutation(case):
    s, y, a, rnd = case
    s, y, a = np.array(s), np.array(y), np.array(a)
    perm = np.arange(len(s))
    for g in (0, 1):
        idx = np.flatnonzero(a == g)
        shuffled = list(idx)
        rnd.shuffle(shuffled)
        perm[idx] = shuffled
    if len(set(a)) == 2:
        assert M.delta_dp(s[perm], a) == pytest.approx(M.delta_dp(s, a), abs=1e-12)
    cells = {(ai, yi) for ai, yi in zip(a, y)}
    if len(cells) == 4:
        # permute inside (a, y) cells so labels stay attached
        perm = np.arange(len(s))
        for key in cells:
            idx = np.flatnonzero((a == key[0]) & (y == key[1]))
            shuffled = list(idx)
            rnd.shuffle(shuffled)
            perm[idx] = shuffled
        assert M.delta_eo(s[perm], y, a) == pytest.approx(M.delta_eo(s, y, a), abs=1e-12)


@given(st.lists(st.integers(0, 1), min_size=4, max_size=30), st.lists(st.integers(0, 1), min_size=4, max_size=30),
       st.lists(st.floats(0.01, 0.99), min_size=1, max_size=9, unique=True))
def test_thresholding_a_binary_predictor_changes_nothing(s, a, thresholds):
    n = min(len(s), len(a))
    s, a = np.array(s[:n], dtype=float), np.array(a[:n])
    if len(set(a)) < 2:
        return
    assert M.mean_thresholded_dp(s, a, sorted(thresholds)) == pytest.approx(M.delta_dp(s, a), abs=1e-12)


@given(st.lists(st.integers(-40, 40), min_size=2, max_size=30, unique=True), st.data())
def test_ap_invariant_to_monotone_transform(scores, data):
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    if sum(labels) == 0:
        labels[0] = 1
    s = np.array(scores) / 8.0
    assert M.average_precision(np.tanh(s / 3) * 7 + 2, labels) == M.average_precision(s, labels)
