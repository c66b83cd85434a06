import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import gammaln

from dptopk.analysis import brute_force_distribution
from dptopk.canonical import (
    UnsupportedOperation,
    UtilityClass,
    canonical_select,
    check_class,
    class_loss,
    classify_subset,
    exact_class_distribution,
    exact_t_marginal,
    iter_class_blocks,
    log_class_size,
    log_class_size_sum,
    n_classes,
    sample_class,
    sample_class_batch,
    sample_member,
)
from dptopk.noise import NoiseKind
from dptopk.scores import ScoreVector


def class_size(h, t, k):
    return 1 if t == k else math.comb(t - h - 2, k - 1 - h)


@pytest.mark.parametrize(
    "h,t,k,size",
    [(0, 4, 2, 2), (2, 3, 3, 1), (1, 7, 4, 6), (0, 10, 3, 28), (4, 6, 5, 1), (0, 6, 5, 1)],
)
def test_log_class_size_examples(h, t, k, size):
    assert log_class_size(h, t, k) == pytest.approx(math.log(size), abs=1e-15)


@pytest.mark.parametrize("h,t,k", [(-1, 5, 2), (2, 5, 2), (0, 2, 3), (0, 3, 3)])
def test_invalid_classes(h, t, k):
    with pytest.raises(ValueError):
        check_class(h, t, k)


def test_class_outside_domain():
    with pytest.raises(ValueError):
        check_class(0, 9, 2, d=8)


@pytest.mark.parametrize("d", range(2, 15))
def test_partition_exact(d):
    for k in range(1, d):
        classes = [(k - 1, k)] + [(h, t) for t in range(k + 1, d + 1) for h in range(k)]
        assert len(classes) == n_classes(d, k)
        assert sum(class_size(h, t, k) for h, t in classes) == math.comb(d, k)
        for t in range(k + 1, d + 1):
            assert sum(class_size(h, t, k) for h in range(k)) == math.comb(t - 1, k - 1)


def test_t_marginal_identity_logspace():
    from scipy.special import logsumexp

    for k, d in [(3, 20), (50, 400), (300, 2500)]:
        for t in range(k + 1, d + 1, max(1, (d - k) // 17)):
            lhs = logsumexp([log_class_size(h, t, k) for h in range(k)])
            assert lhs == pytest.approx(log_class_size_sum(t, k), rel=1e-12, abs=1e-12)


def test_recurrences_match_log_gamma():
    d, k = 10_000, 1_000
    scores = ScoreVector.from_raw(np.arange(d, 0, -1, dtype=float))
    worst = 0.0
    for h, t, log_size, _ in iter_class_blocks(scores, k, 0.5):
        tt = np.maximum(t, k + 1)
        ref = np.where(t == k, 0.0, gammaln(tt - h - 1) - gammaln(k - h) - gammaln(tt - k))
        worst = max(worst, float(np.max(np.abs(log_size - ref) / np.maximum(1.0, np.abs(ref)))))
    assert worst <= 1e-10

    for _, t, log_size, _ in iter_class_blocks(scores, k, 1.0):
        ref = gammaln(t) - gammaln(k) - gammaln(t - k + 1)
        assert np.max(np.abs(log_size - ref) / np.maximum(1.0, np.abs(ref))) <= 1e-10


def test_block_order_and_count():
    scores = ScoreVector.from_raw(np.arange(9.0))
    k = 3
    blocks = list(iter_class_blocks(scores, k, 0.5, max_cells=4))
    pairs = [(int(h), int(t)) for hs, ts, _, _ in blocks for h, t in zip(hs, ts)]
    assert len(pairs) == n_classes(9, k)
    assert pairs[0] == (k - 1, k)
    expected = [(k - 1, k)] + [(h, t) for t in range(k + 1, 10) for h in range(k - 1, -1, -1)]
    assert pairs == expected
    merged = list(iter_class_blocks(scores, k, 1.0, max_cells=2))
    assert [int(t) for _, ts, _, _ in merged for t in ts] == list(range(k, 10))
    assert sum(b[0].size for b in merged) == n_classes(9, k, gamma_is_one=True)


def test_class_loss_examples():
    scores = ScoreVector.from_raw([5.0, 1.0, 3.0, 4.0, 2.0])
    # sorted: 5 4 3 2 1
    assert class_loss(0, 3, 0.5, scores) == pytest.approx(0.5 * 5 - 0.5 * 3)
    assert class_loss(1, 2, 1.0, scores) == -4.0
    assert class_loss(2, 5, 0.0, scores) == 3.0
    with pytest.raises(ValueError):
        class_loss(3, 3, 0.5, scores)


def test_top_k_has_smallest_loss():
    rng = np.random.default_rng(3)
    for _ in range(20):
        scores = ScoreVector.from_raw(rng.normal(size=8))
        for gamma in (0.0, 0.5, 1.0):
            losses = {
                (h, t): class_loss(h, t, gamma, scores)
                for t in range(3, 9)
                for h in range(3)
                if t > 3 or h == 2
            }
            assert min(losses.values()) == pytest.approx(losses[(2, 3)])


def test_classify_subset():
    scores = ScoreVector.from_raw([10.0, 9.0, 8.0, 7.0, 6.0])
    assert classify_subset((0, 1), scores).key == (1, 2)
    assert classify_subset((0, 2), scores).key == (1, 3)
    assert classify_subset((1, 4), scores).key == (0, 5)
    assert classify_subset((2, 0, 1), scores).key == (2, 3)
    assert classify_subset((0, 1, 4), scores).key == (2, 5)
    for bad in [(0, 0), (), (0, 7), tuple(range(5))]:
        with pytest.raises(ValueError):
            classify_subset(bad, scores)


@pytest.mark.parametrize("cls,k,d", [((0, 4), 2, 5), ((1, 7), 4, 8), ((0, 6), 3, 6), ((2, 3), 3, 5)])
def test_sample_member_uniform(cls, k, d):
    scores = ScoreVector.from_raw(np.arange(d, 0, -1, dtype=float))
    members = [
        y for y in itertools.combinations(range(d), k) if classify_subset(y, scores).key == cls
    ]
    assert len(members) == class_size(*cls, k)
    rng = np.random.default_rng(17)
    n = 20_000
    draws = [sample_member(UtilityClass.of(*cls, k), k, scores, False, rng) for _ in range(n)]
    assert set(draws) <= set(members)
    if len(members) > 1:
        counts = [draws.count(m) for m in members]
        assert stats.chisquare(counts).pvalue > 0.001
    else:
        assert set(draws) == set(members)


def test_sample_member_gamma_one_uniform_over_t():
    d, k, t = 7, 3, 6
    scores = ScoreVector.from_raw(np.arange(d, 0, -1, dtype=float))
    members = [y for y in itertools.combinations(range(d), k) if max(y) == t - 1]
    assert len(members) == math.comb(t - 1, k - 1)
    rng = np.random.default_rng(5)
    draws = [sample_member(UtilityClass(None, t, 0.0), k, scores, True, rng) for _ in range(20_000)]
    counts = [draws.count(m) for m in members]
    assert sum(counts) == 20_000
    assert stats.chisquare(counts).pvalue > 0.001


def test_sample_member_needs_h():
    with pytest.raises(ValueError):
        sample_member(UtilityClass(None, 4, 0.0), 2, np.arange(5.0), False, np.random.default_rng(0))


def _close_to_brute_force(scores, k, eps, gamma):
    dist = exact_class_distribution(scores, k, eps, gamma)
    _, brute = brute_force_distribution(scores, k, eps, gamma)
    p = np.exp(dist.log_probs)
    for (h, t), q in brute.items():
        assert abs(p[h, t - k] - q) <= 1e-12
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert len(dist.entries) == len(brute)


@pytest.mark.parametrize("gamma", [0.0, 0.3, 0.5, 1.0])
@pytest.mark.parametrize("d,k", [(2, 1), (5, 2), (7, 3), (9, 4)])
def test_exact_matches_brute_force(rng, d, k, gamma):
    scores = ScoreVector.from_raw(rng.normal(scale=2.0, size=d))
    _close_to_brute_force(scores, k, 1.3, gamma)


def test_exact_with_ties():
    scores = ScoreVector.from_raw([1.0, 1.0, 0.0, 0.0, 1.0, -2.0])
    _close_to_brute_force(scores, 3, 2.0, 0.5)


def test_exact_t_marginal_matches_full():
    rng = np.random.default_rng(8)
    scores = ScoreVector.from_raw(rng.normal(size=40))
    ts, log_p = exact_t_marginal(scores, 6, 0.7)
    full = exact_class_distribution(scores, 6, 0.7, 1.0).log_t_marginal()
    assert ts.tolist() == list(range(6, 41))
    np.testing.assert_allclose(log_p, full, atol=1e-10)


def test_exact_requires_gumbel():
    for kind in NoiseKind:
        if kind is not NoiseKind.GUMBEL:
            with pytest.raises(UnsupportedOperation):
                exact_class_distribution(np.arange(5.0), 2, 1.0, 0.5, kind)


@pytest.mark.parametrize("k,eps,gamma", [(0, 1.0, 0.5), (5, 1.0, 0.5), (2, 0.0, 0.5), (2, 1.0, 1.5)])
def test_argument_validation(k, eps, gamma):
    with pytest.raises(ValueError):
        exact_class_distribution(np.arange(5.0), k, eps, gamma)
    with pytest.raises(ValueError):
        sample_class(np.arange(5.0), k, eps, gamma, rng=np.random.default_rng(0))


def test_small_epsilon_limit_is_counting():
    d, k = 9, 3
    scores = ScoreVector.from_raw(np.random.default_rng(1).normal(size=d))
    dist = exact_class_distribution(scores, k, 1e-12, 0.5)
    for (h, t), lp in dist.entries.items():
        assert math.exp(lp) == pytest.approx(class_size(h, t, k) / math.comb(d, k), rel=1e-9)


def test_large_epsilon_concentrates_on_top():
    scores = ScoreVector.from_raw(np.arange(10.0))
    dist = exact_class_distribution(scores, 4, 200.0, 0.5)
    assert dist.log_prob(3, 4) == pytest.approx(0.0, abs=1e-12)


def test_gamma_zero_ignores_tail_rank():
    scores = ScoreVector.from_raw(np.random.default_rng(2).normal(size=9))
    dist = exact_class_distribution(scores, 3, 1.0, 0.0)
    p = np.exp(dist.log_probs)
    for h in range(3):
        row = p[h, 1:]
        sizes = np.array([class_size(h, t, 3) for t in range(4, 10)], dtype=float)
        np.testing.assert_allclose(row / row.sum(), sizes / sizes.sum(), rtol=1e-12)


def test_gamma_moves_mass_toward_tail_quality():
    # log-weights are linear in gamma with statistic x_(t) + x_(h+1), whose
    # mean is therefore nondecreasing in gamma.
    scores = ScoreVector.from_raw(np.random.default_rng(6).normal(scale=3.0, size=30))
    k, eps = 5, 1.0
    x = scores.sorted
    stat = x[np.arange(k)][:, None] + x[np.arange(k, 31) - 1][None, :]
    means = []
    for gamma in np.linspace(0.0, 1.0, 11):
        p = np.exp(exact_class_distribution(scores, k, eps, gamma).log_probs)
        means.append(float((p * stat).sum()))
    assert np.all(np.diff(means) > 0)


def test_adjacent_dimension_structure():
    k = 4
    scores = ScoreVector.from_raw(np.arange(k + 1.0))
    dist = exact_class_distribution(scores, k, 1.0, 0.5)
    assert sorted(dist.entries) == sorted([(h, k + 1) for h in range(k)] + [(k - 1, k)])
    for h in range(k):
        assert log_class_size(h, k + 1, k) == 0.0


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.integers(-40, 40).map(lambda v: v / 8), min_size=3, max_size=8),
    st.floats(-100, 100),
    st.sampled_from([0.0, 0.5, 1.0]),
)
def test_exact_shift_invariance(raw, shift, gamma):
    x = np.array(raw)
    k = len(raw) // 2
    a = exact_class_distribution(x, k, 1.0, gamma).log_probs
    b = exact_class_distribution(x + shift, k, 1.0, gamma).log_probs
    np.testing.assert_allclose(np.exp(a), np.exp(b), atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(-40, 40).map(lambda v: v / 8), min_size=3, max_size=8), st.integers(0, 2**32 - 1))
def test_sampler_shift_invariance(raw, seed):
    x = np.array(raw)
    k = len(raw) // 2
    for gamma in (0.5, 1.0):
        a = canonical_select(x, k, 1.0, gamma, rng=np.random.default_rng(seed)).subset
        b = canonical_select(x + 1024.0, k, 1.0, gamma, rng=np.random.default_rng(seed)).subset
        assert a == b


@pytest.mark.parametrize("gamma", [0.5, 1.0])
def test_sample_class_batch_law(gamma):
    rng = np.random.default_rng(31)
    scores = ScoreVector.from_raw(rng.normal(scale=1.5, size=7))
    k, eps, n = 3, 1.5, 200_000
    dist = exact_class_distribution(scores, k, eps, gamma)
    h, t, v = sample_class_batch(scores, k, eps, gamma, NoiseKind.GUMBEL, rng, n)
    assert np.all(np.isfinite(v))
    if gamma == 1.0:
        assert np.all(h == -1)
        p = np.exp(dist.log_t_marginal())
        counts = np.bincount(t - k, minlength=p.size)
    else:
        keys = list(dist.entries)
        p = np.array([math.exp(dist.entries[key]) for key in keys])
        index = {key: i for i, key in enumerate(keys)}
        counts = np.bincount([index[(a, b)] for a, b in zip(h.tolist(), t.tolist())], minlength=p.size)
    assert stats.chisquare(counts, n * p / p.sum()).pvalue > 0.001


def test_sample_class_gamma_one_has_no_h():
    cls, value = sample_class(np.arange(10.0), 3, 1.0, 1.0, rng=np.random.default_rng(0))
    assert cls.h is None and 3 <= cls.t <= 10 and math.isfinite(value)
    assert cls.log_size == pytest.approx(math.log(math.comb(cls.t - 1, 2)))


@pytest.mark.parametrize("gamma", [0.5, 1.0])
def test_canonical_select_subset_law(gamma):
    rng = np.random.default_rng(41)
    scores = ScoreVector.from_raw(rng.normal(scale=2.0, size=5))
    k, eps, n = 2, 2.0, 40_000
    subset_probs, _ = brute_force_distribution(scores, k, eps, gamma)
    draws = [canonical_select(scores, k, eps, gamma, rng=rng) for _ in range(n)]
    counts = {y: 0 for y in subset_probs}
    for s in draws:
        counts[s.subset] += 1
        assert s.loss == pytest.approx(class_loss(s.cls.h, s.cls.t, gamma, scores))
        assert classify_subset(s.subset, scores) == s.cls
    keys = list(subset_probs)
    assert stats.chisquare([counts[y] for y in keys], [n * subset_probs[y] for y in keys]).pvalue > 0.001


@pytest.mark.parametrize("kind", [NoiseKind.LAPLACE, NoiseKind.EXPONENTIAL])
def test_other_noise_runs(kind):
    rng = np.random.default_rng(0)
    sel = canonical_select(np.arange(50.0), 5, 5.0, 0.5, kind, rng)
    assert len(sel.subset) == 5 and len(set(sel.subset)) == 5


def test_large_instance_smoke():
    scores = ScoreVector.from_raw(np.random.default_rng(0).normal(size=3000) * 50)
    for gamma in (0.5, 1.0):
        sel = canonical_select(scores, 100, 1.0, gamma, rng=np.random.default_rng(1))
        assert len(sel.subset) == 100


def test_gamma_one_chunked_path_law(monkeypatch):
    import dptopk.canonical as canonical

    scores = ScoreVector.from_raw(np.random.default_rng(3).normal(size=12))
    k, eps, n = 3, 2.0, 100_000
    _, log_p = exact_t_marginal(scores, k, eps)
    monkeypatch.setattr(canonical, "_CELL_BUDGET", 64)
    h, t, _ = sample_class_batch(scores, k, eps, 1.0, NoiseKind.GUMBEL, np.random.default_rng(9), n)
    assert np.all(h == -1)
    counts = np.bincount(t - k, minlength=log_p.size)
    assert stats.chisquare(counts, n * np.exp(log_p)).pvalue > 0.001
