import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devdet.metrics import (
    MetricsReport,
    ScoredSample,
    UndefinedMetricError,
    acc_split,
    auc,
    scored_samples,
    summarize,
    tied_ranks,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else (0.5 if a == b else 0.0)
    return total / (len(pos) * len(neg))


def count_acc(scores, labels, tau):
    f = [s >= tau for s, y in zip(scores, labels) if y == 1]
    r = [s < tau for s, y in zip(scores, labels) if y == 0]
    return sum(f) / len(f), sum(r) / len(r)


def test_separated_but_shifted_scores():
    s = scored_samples([0.9] * 5 + [0.8] * 5, [1] * 5 + [0] * 5, [0] * 10)
    assert auc(s) == 1.0
    f, r = acc_split(s, 0.5)
    assert (f, r) == (1.0, 0.0)
    assert (f + r) / 2 == 0.5


def test_all_ties_half():
    s = scored_samples([0.3] * 6, [1, 0, 1, 0, 1, 0], [0] * 6)
    assert auc(s) == 0.5


def test_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auc(scored_samples([0.1, 0.2], [1, 1], [0, 0]))


def test_threshold_counts_as_fake():
    f, r = acc_split([ScoredSample(0.5, 1), ScoredSample(0.5, 0)], 0.5)
    assert f == 1.0 and r == 0.0


def test_absent_class_reported_absent():
    f, r = acc_split([ScoredSample(0.7, 1)], 0.5)
    assert f == 1.0 and r is None


def test_tied_ranks_average():
    np.testing.assert_array_equal(tied_ranks(np.array([3.0, 1.0, 3.0, 2.0])), [3.5, 1.0, 3.5, 2.0])


def test_rank_auc_matches_pairwise_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 120))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        s = scored_samples(scores, labels, np.zeros(n, int))
        assert abs(auc(s) - pairwise_auc(scores, labels)) <= 1e-12


def test_acc_split_matches_counting():
    rng = np.random.default_rng(1)
    scores = np.round(rng.random(300), 2)
    labels = rng.integers(0, 2, 300)
    got = acc_split(scored_samples(scores, labels, np.zeros(300, int)), 0.5)
    assert got == count_acc(scores, labels, 0.5)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 1)), min_size=2, max_size=60).filter(
        lambda xs: {y for _, y in xs} == {0, 1}
    )
)
def test_auc_invariant_under_monotone_transform(pairs):
    # scores on a 1e-3 grid so the transform stays strictly increasing in
    # floating point (exp of arbitrary tiny floats collapses into ties)
    scores = np.array([s / 1000 for s, _ in pairs])
    labels = np.array([y for _, y in pairs])
    a = auc(scored_samples(scores, labels, np.zeros(len(labels), int)))
    b = auc(scored_samples(np.exp(3 * scores) - 7, labels, np.zeros(len(labels), int)))
    assert a == b
    assert a == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_acc_split_invariant_under_cut_preserving_transform():
    rng = np.random.default_rng(2)
    scores = rng.random(100)
    labels = rng.integers(0, 2, 100)
    moved = np.where(scores >= 0.5, 0.5 + (scores - 0.5) ** 2, 0.5 - (0.5 - scores) / 3)
    assert acc_split(scored_samples(scores, labels, labels * 0)) == acc_split(scored_samples(moved, labels, labels * 0))


def test_single_domain_pooling_identity():
    rng = np.random.default_rng(3)
    s = rng.random(40)
    y = np.arange(40) % 2
    rep = summarize(scored_samples(s, y, np.full(40, 5)))
    assert rep.s_auc == rep.per_domain[5].auc


def test_interleaved_domains_break_pooled_auc():
    # domain 0: real 0.1, fake 0.3 ; domain 1: real 0.35, fake 0.45
    scores = [0.1, 0.3, 0.35, 0.45]
    labels = [0, 1, 0, 1]
    domains = [0, 0, 1, 1]
    rep = summarize(scored_samples(scores, labels, domains))
    assert rep.per_domain[0].auc == 1.0 and rep.per_domain[1].auc == 1.0
    assert rep.s_auc == pairwise_auc(scores, labels) == 0.75
    # nothing reaches 0.5: every fake is missed, every real is right
    assert rep.m_acc == 0.5


def test_m_acc_is_mean_over_domains():
    scores = [0.9, 0.1, 0.6, 0.7, 0.2, 0.3]
    labels = [1, 0, 1, 0, 1, 0]
    domains = [0, 0, 1, 1, 2, 2]
    rep = summarize(scored_samples(scores, labels, domains))
    assert rep.m_acc == pytest.approx(np.mean([1.0, 0.5, 0.5]))


def test_report_round_trip_is_exact():
    rng = np.random.default_rng(4)
    rep = summarize(scored_samples(rng.random(50), np.arange(50) % 2, np.arange(50) % 3))
    text = rep.to_text()
    again = MetricsReport.from_text(text)
    assert again.to_text() == text
    assert again.s_auc == rep.s_auc
