import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devdet.mining import (
    MiningConfig,
    ScoreTable,
    Strategy,
    highest_reals,
    lowest_fakes,
    select,
    select_variant,
)


def table(confs, labels, ids=None):
    ids = ids or [f"s{i:03d}" for i in range(len(confs))]
    return ScoreTable(ids, np.asarray(confs, float), np.asarray(labels), np.zeros(len(confs), int))


def test_worked_example():
    t = table([0.9, 0.2, 0.4, 0.1, 0.8, 0.3], [1, 1, 1, 0, 0, 0])
    hf, er = select(t, MiningConfig(2, 2))
    assert hf == ["s001", "s002"]  # fakes scored 0.2 and 0.4
    assert er == ["s003", "s005"]  # reals scored 0.1 and 0.3
    assert highest_reals(t, 1) == ["s004"]


def test_ties_broken_by_sample_id():
    t = table([0.5, 0.5, 0.5, 0.1], [1, 1, 1, 0], ["c", "a", "b", "z"])
    assert lowest_fakes(t, 2) == ["a", "b"]


def test_default_sizes_are_ten_percent():
    rng = np.random.default_rng(0)
    t = table(rng.random(200), np.r_[np.ones(120, int), np.zeros(80, int)])
    hf, er = select(t, MiningConfig())
    assert (len(hf), len(er)) == (12, 8)


def test_oversized_k_rejected():
    t = table([0.1, 0.2], [1, 0])
    with pytest.raises(ValueError, match="exceeds"):
        select(t, MiningConfig(2, 1))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=4, max_size=50).filter(
    lambda xs: sum(y for _, y in xs) >= 2 and sum(1 - y for _, y in xs) >= 2))
def test_matches_full_sort_oracle(pairs):
    confs = [c / 20 for c, _ in pairs]
    labels = [y for _, y in pairs]
    t = table(confs, labels)
    hf, er = select(t, MiningConfig(2, 2))
    fakes = sorted((c, sid) for c, y, sid in zip(confs, labels, t.sample_ids) if y == 1)
    reals = sorted((c, sid) for c, y, sid in zip(confs, labels, t.sample_ids) if y == 0)
    assert hf == [sid for _, sid in fakes[:2]]
    assert er == [sid for _, sid in reals[:2]]
    # every selected hard fake scores no higher than any unselected fake
    chosen = {sid for sid in hf}
    cmax = max(c for c, sid in fakes if sid in chosen)
    assert all(c >= cmax for c, sid in fakes if sid not in chosen)


def test_selection_grows_monotonically_with_k():
    rng = np.random.default_rng(1)
    t = table(np.round(rng.random(60), 2), rng.integers(0, 2, 60))
    prev = []
    for k in range(1, 10):
        hf, _ = select(t, MiningConfig(k, 1))
        assert hf[:len(prev)] == prev
        prev = hf


def test_variants():
    t = table([0.9, 0.2, 0.4, 0.1, 0.8, 0.3], [1, 1, 1, 0, 0, 0])
    cfg = MiningConfig(1, 1)
    assert select_variant(t, MiningConfig(1, 1, Strategy.HF_ONLY)) == ["s001"]
    assert select_variant(t, MiningConfig(1, 1, Strategy.HF_HR)) == ["s001", "s004"]
    assert select_variant(t, cfg) == ["s001", "s003"]
    assert select_variant(t, MiningConfig(1, 1, Strategy.ALL)) == t.sample_ids


def test_score_table_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    t = table(np.round(rng.random(20), 9), rng.integers(0, 2, 20))
    t.write(tmp_path / "s.txt")
    again = ScoreTable.read(tmp_path / "s.txt")
    assert again.sample_ids == t.sample_ids
    np.testing.assert_array_equal(again.confidences, t.confidences)
    assert select(again, MiningConfig(2, 2)) == select(t, MiningConfig(2, 2))
