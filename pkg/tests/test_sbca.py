import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripletgen import sbca
from tripletgen.errors import ConfigError, DataError

A, B, C = 1, 2, 3
HAND_LISTS = [[A], [A, B], [A], [C]]
HAND_GROUPS = [1, 1, 2, 2]


def test_class_stats_direct_count():
    s = sbca.compute_class_stats(HAND_LISTS)
    assert s.counts == {A: 3, B: 1, C: 1}


def test_class_stats_counts_samples_not_pixels():
    s = sbca.compute_class_stats([[7, 7, 7], [7]])
    assert s.counts == {7: 2}


def test_class_stats_all_share():
    s = sbca.compute_class_stats([[4]] * 9)
    assert s.counts == {4: 9}
    with pytest.raises(DataError):
        sbca.compute_class_stats([])


def test_class_stats_matches_independent_recount(small_corpus):
    s = sbca.compute_class_stats(small_corpus)
    recount = {}
    for e in small_corpus.entries:
        for c in set(e.classes):
            recount[c] = recount.get(c, 0) + 1
    assert s.counts == recount


def test_hand_case():
    stats = sbca.compute_class_stats(HAND_LISTS, alpha=1.0, epsilon_floor=0.0)
    table = sbca.compute_weights(stats, HAND_GROUPS, HAND_LISTS)
    np.testing.assert_allclose(table.W, [1 / 8, 3 / 8, 1 / 8, 3 / 8], rtol=0, atol=1e-15)
    oracle = sbca.brute_force_weights_oracle(stats, HAND_GROUPS, HAND_LISTS)
    np.testing.assert_allclose(oracle.W, table.W, rtol=1e-12)


def test_single_group_symmetric_is_uniform():
    lists = [[5]] * 7
    table = sbca.compute_weights(sbca.compute_class_stats(lists), [1] * 7, lists)
    np.testing.assert_allclose(table.W, np.full(7, 1 / 7), rtol=1e-12)


def test_singleton_groups():
    lists = [[1], [1, 2], [3], [], [2]]
    table = sbca.compute_weights(sbca.compute_class_stats(lists), [1, 2, 3, 4, 5], lists)
    np.testing.assert_allclose(table.W, np.full(5, 1 / 5), rtol=1e-12)


def test_alpha_zero_collapses_rarity():
    lists = [[1], [1, 2], [3], [1], [2, 3]]
    groups = [1, 1, 1, 2, 2]
    table = sbca.compute_weights(sbca.compute_class_stats(lists, alpha=0.0), groups, lists)
    np.testing.assert_allclose(table.W, [1 / 6, 1 / 6, 1 / 6, 1 / 4, 1 / 4], rtol=1e-12)


def test_empty_class_list_gets_floor():
    lists = [[], [1]]
    stats = sbca.compute_class_stats(lists, alpha=1.0, epsilon_floor=0.05)
    table = sbca.compute_weights(stats, [1, 1], lists)
    assert table.r[0] == 0.05
    assert table.W[0] > 0


def test_zero_total_group_is_config_error():
    stats = sbca.compute_class_stats([[1]], epsilon_floor=0.0)
    with pytest.raises(ConfigError):
        sbca.compute_weights(stats, [1, 2], [[1], []])


def test_bad_groups():
    stats = sbca.compute_class_stats([[1]])
    with pytest.raises(ConfigError):
        sbca.compute_weights(stats, [0], [[1]])
    with pytest.raises(ConfigError):
        sbca.compute_weights(stats, [1, 1], [[1]])
    with pytest.raises(ConfigError):
        sbca.ClassStats({1: 1}, alpha=float("nan"))


@st.composite
def instances(draw):
    n = draw(st.integers(1, 30))
    K = draw(st.integers(1, min(n, 6)))
    groups = list(range(1, K + 1)) + [draw(st.integers(1, K)) for _ in range(n - K)]
    lists = [draw(st.lists(st.integers(1, 6), max_size=4, unique=True)) for _ in range(n)]
    alpha = draw(st.floats(0.0, 2.0))
    eps = draw(st.floats(1e-3, 0.5))
    return lists, groups, K, alpha, eps


@settings(max_examples=150, deadline=None)
@given(instances())
def test_weight_invariants(inst):
    lists, groups, K, alpha, eps = inst
    stats = sbca.compute_class_stats(lists, alpha, eps)
    table = sbca.compute_weights(stats, groups, lists, K)
    assert np.all(table.W > 0)
    assert abs(table.W.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(table.group_sums(), np.full(K, 1 / K), rtol=0, atol=1e-12)
    oracle = sbca.brute_force_weights_oracle(stats, groups, lists, K)
    np.testing.assert_allclose(table.W, oracle.W, rtol=1e-12)
    # epsilon floor lower bound
    w = stats.rarity()
    wmax = max(w.values()) if w else 0.0
    sizes = np.bincount(np.asarray(groups) - 1, minlength=K)
    for i, g in enumerate(groups):
        bound = (1 / K) * eps / (eps * sizes[g - 1] + sizes[g - 1] * wmax)
        assert table.W[i] >= bound * (1 - 1e-12)


@settings(max_examples=100, deadline=None)
@given(instances(), st.floats(0.1, 10.0))
def test_within_group_scale_invariance(inst, factor):
    lists, groups, K, alpha, eps = inst
    stats = sbca.compute_class_stats(lists, alpha, eps)
    table = sbca.compute_weights(stats, groups, lists, K)
    groups = np.asarray(groups)
    scaled = table.r * np.where(groups == 1, factor, 1.0)
    totals = np.bincount(groups - 1, weights=scaled, minlength=K)
    np.testing.assert_allclose(scaled / (K * totals[groups - 1]), table.W, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(instances())
def test_rarity_monotonicity(inst):
    lists, groups, K, alpha, eps = inst
    if alpha == 0:
        return
    stats = sbca.compute_class_stats(lists, alpha, eps)
    table = sbca.compute_weights(stats, groups, lists, K)
    w = stats.rarity()
    rarest = [max((w[c] for c in cl), default=0.0) for cl in lists]
    for a in range(len(lists)):
        for b in range(len(lists)):
            if groups[a] == groups[b] and rarest[a] > rarest[b]:
                assert table.W[a] > table.W[b]


def test_sampler_matches_weights():
    stats = sbca.compute_class_stats(HAND_LISTS, alpha=1.0, epsilon_floor=0.0)
    table = sbca.compute_weights(stats, HAND_GROUPS, HAND_LISTS)
    draws = sbca.weighted_sample(table, 100_000, np.random.default_rng(0))
    freq = np.bincount(draws, minlength=4) / 1e5
    sd = np.sqrt(table.W * (1 - table.W) / 1e5)
    assert np.all(np.abs(freq - table.W) <= 3 * sd)
    assert abs(freq[1] - 0.375) <= 0.005


def test_sampler_edge_cases():
    one = sbca.uniform_table(1, ["only"])
    assert sbca.weighted_sample(one, 50, np.random.default_rng(0)) == ["only"] * 50
    with pytest.raises(ConfigError):
        sbca.weighted_sample(one, 0, np.random.default_rng(0))
    t = sbca.uniform_table(10)
    a = sbca.weighted_sample(t, 20, np.random.default_rng(3))
    b = sbca.weighted_sample(t, 20, np.random.default_rng(3))
    assert a == b
    s1, s2 = sbca.WeightedSampler(t, 8, 5), sbca.WeightedSampler(t, 8, 5)
    assert [next(s1) for _ in range(3)] == [next(s2) for _ in range(3)]


def test_csv_export(tmp_path):
    stats = sbca.compute_class_stats(HAND_LISTS, alpha=1.0, epsilon_floor=0.0)
    table = sbca.compute_weights(stats, HAND_GROUPS, HAND_LISTS, sample_ids=["a", "b", "c", "d"])
    text = table.to_csv(tmp_path / "w.csv").read_text().splitlines()
    assert text[0] == "sample_id,group_id,r,W"
    assert text[2].split(",")[:2] == ["b", "1"]
    assert float(text[2].split(",")[3]) == 0.375
