"""Oracles, utility predicates, Monte Carlo estimation, auditing and bounds."""

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from dptopk.canonical import class_loss, classify_subset, exact_class_distribution
from dptopk.scores import as_scores

BRUTE_FORCE_LIMIT = 10**6

__all__ = [
    "BoundInputs",
    "DomainTooLarge",
    "Predicate",
    "PredicateKind",
    "WitnessError",
    "brute_force_distribution",
    "canonical_loss_oracle",
    "classify_subset",
    "dp_audit_exact",
    "dp_audit_mc",
    "extreme_neighbors",
    "joint_loss",
    "leap_expectations",
    "log_c_dk",
    "mc_estimate",
    "predicate_probability",
    "r_alpha_k",
    "utility_bound",
]


class DomainTooLarge(ValueError):
    pass


class WitnessError(RuntimeError):
    """The constructive witness for the canonical loss did not check out."""


class PredicateKind(str, enum.Enum):
    TOP = "TOP"
    GREAT = "GREAT"
    GOOD = "GOOD"


@dataclass(frozen=True)
class Predicate:
    """Closeness of a class ``(h, t)`` to the exact top-k.

    GREAT keeps the top ``ceil(k/10)`` and stays within the top
    ``floor(11k/10)``; GOOD keeps the top ``ceil(k/100)`` and stays within the
    top ``floor(3k/2)``.
    """

    kind: PredicateKind
    k: int

    def __post_init__(self):
        object.__setattr__(self, "kind", PredicateKind(str(self.kind).upper().split(".")[-1]))
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")

    @property
    def min_h(self):
        k = self.k
        need = {PredicateKind.TOP: k - 1, PredicateKind.GREAT: -(-k // 10), PredicateKind.GOOD: -(-k // 100)}[self.kind]
        # h is capped at k - 1, so at k = 1 "contains the top item" is h = 0.
        return min(need, k - 1)

    @property
    def max_t(self):
        k = self.k
        return {PredicateKind.TOP: k, PredicateKind.GREAT: 11 * k // 10, PredicateKind.GOOD: 3 * k // 2}[self.kind]

    def holds(self, h, t):
        return h >= self.min_h and t <= self.max_t

    def __str__(self):
        return self.kind.value


@dataclass(frozen=True)
class BoundInputs:
    d: int
    k: int
    alpha: float
    epsilon: float
    gamma: float = 1.0
    delta_loss: float = 1.0

    def __post_init__(self):
        if not 1 <= self.k < self.d:
            raise ValueError(f"need 1 <= k < d, got k={self.k}, d={self.d}")
        if not 0 < self.alpha <= 0.1:
            raise ValueError(f"alpha must lie in (0, 0.1], got {self.alpha}")
        if not self.epsilon > 0 or not self.delta_loss > 0:
            raise ValueError("epsilon and delta_loss must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


def _check_size(subset, k=None):
    if k is not None and len(subset) != k:
        raise ValueError(f"expected a subset of size {k}, got {len(subset)}")
    if len(set(subset)) != len(subset) or not subset:
        raise ValueError("subset must hold distinct item indices")


def brute_force_distribution(scores, k, epsilon, gamma):
    """Enumerate every k-subset with weight ``exp(-eps * LOSS / 2)``.

    Returns ``(subset_probs, class_probs)``: dicts keyed by sorted index tuples
    and by ``(h, t)``.
    """
    scores = as_scores(scores)
    total = math.comb(scores.d, k)
    if total > BRUTE_FORCE_LIMIT:
        raise DomainTooLarge(f"C({scores.d}, {k}) = {total} subsets exceeds {BRUTE_FORCE_LIMIT}")
    subsets = list(itertools.combinations(range(scores.d), k))
    keys = []
    log_w = np.empty(len(subsets))
    for i, y in enumerate(subsets):
        c = classify_subset(y, scores)
        keys.append((c.h, c.t))
        log_w[i] = -0.5 * epsilon * class_loss(c.h, c.t, gamma, scores)
    probs = np.exp(log_w - logsumexp(log_w))
    subset_probs = dict(zip(subsets, probs.tolist()))
    class_probs = {}
    for key, p in zip(keys, probs.tolist()):
        class_probs[key] = class_probs.get(key, 0.0) + p
    return subset_probs, class_probs


def canonical_loss_oracle(subset, scores, rtol=1e-9):
    """L-infinity distance to the nearest vector whose top-k is ``subset``.

    Computes half the gap between the best missing item and the worst member,
    then checks the witness: raising members by that amount and lowering the
    rest makes ``subset`` a top-k (ties allowed), while any smaller shift fails.
    """
    scores = as_scores(scores)
    _check_size(subset)
    members = np.zeros(scores.d, dtype=bool)
    members[list(subset)] = True
    worst_in = scores.raw[members].min()
    best_out = scores.raw[~members].max()
    gap = max(0.0, best_out - worst_in)
    half = gap / 2.0
    tol = rtol * (1.0 + np.abs(scores.raw).max())
    v = np.where(members, scores.raw + half, scores.raw - half)
    if v[members].min() < v[~members].max() - tol:
        raise WitnessError(f"shift {half} does not make {tuple(subset)} optimal")
    if gap > 2 * tol:
        shrunk = half - 2 * tol
        w = np.where(members, scores.raw + shrunk, scores.raw - shrunk)
        if w[members].min() >= w[~members].max():
            raise WitnessError(f"a shift below {half} already makes {tuple(subset)} optimal")
    return half


def joint_loss(subset, scores):
    """``max_l (x_(l) - y_(l)) / 2`` with ``y`` the subset's sorted scores."""
    scores = as_scores(scores)
    _check_size(subset)
    k = len(subset)
    if k >= scores.d:
        raise ValueError(f"subset size {k} must be below d={scores.d}")
    y = np.sort(scores.raw[list(subset)])[::-1]
    return float(np.max(scores.sorted[:k] - y) / 2.0)


def predicate_probability(dist, pred):
    """Total probability of the classes satisfying ``pred``."""
    k = dist.k
    h = np.arange(k)[:, None]
    t = np.arange(k, dist.d + 1)[None, :]
    mask = (h >= pred.min_h) & (t <= pred.max_t)
    sel = dist.log_probs[mask]
    if sel.size == 0:
        return 0.0
    return float(min(1.0, math.exp(logsumexp(sel))))


def mc_estimate(mechanism, scores, pred, trials, rng):
    """Frequency with which ``mechanism(scores, rng)`` satisfies ``pred``.

    Returns ``(p_hat, std_err)`` with the binomial standard error.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    scores = as_scores(scores)
    hits = 0
    for _ in range(trials):
        c = classify_subset(mechanism(scores, rng), scores)
        hits += pred.holds(c.h, c.t)
    p = hits / trials
    return p, math.sqrt(p * (1.0 - p) / trials)


def classify_rank_batch(ranks, k):
    """Vectorised classification of 0-based rank sets, shape ``(n, k)``.

    Returns ``(h, t)`` arrays.
    """
    srt = np.sort(ranks, axis=1) + 1
    t = srt[:, -1]
    mismatch = srt != np.arange(1, k + 1)[None, :]
    h = np.where(mismatch.any(axis=1), np.argmax(mismatch, axis=1), k - 1)
    return h, t


def log_c_dk(d, k):
    """``log C(d, k) - k log(d / k)``."""
    return math.lgamma(d + 1) - math.lgamma(k + 1) - math.lgamma(d - k + 1) - k * math.log(d / k)


def r_alpha_k(alpha, k):
    """Ratio of the Sidak to the Bonferroni per-test failure rate."""
    return -math.expm1(math.log1p(-alpha) / k) / (alpha / k)


def utility_bound(inputs, which="canonical", exact=True):
    """Additive slack ``s`` such that ``x_(T) > x_(k) - s`` w.p. at least 1 - alpha.

    ``T`` is the worst-ranked reported item. ``exact`` replaces the ``+k``
    (canonical) and ``-0.06k`` (peeling) constants by ``log c_{d,k}`` and
    ``-k log r_{alpha,k}``.
    """
    d, k, a = inputs.d, inputs.k, inputs.alpha
    if which == "canonical":
        e = k * math.log(d / k) + math.log(1 / a) + (log_c_dk(d, k) if exact else k)
        return 2 * inputs.delta_loss / (inputs.gamma * inputs.epsilon) * e
    if which == "peeling":
        tail = -k * math.log(r_alpha_k(a, k)) if exact else -0.06 * k
        e = k * math.log(d * k) + k * math.log(1 / a) + tail
        return 2 * inputs.delta_loss / inputs.epsilon * e
    raise ValueError(f"unknown bound {which!r}")


def leap_expectations(d, k, gamma=1.0):
    """Means of the CANONICAL and PEELING logistic leaps."""
    if not 1 <= k < d - 1:
        raise ValueError(f"need 1 <= k < d - 1, got k={k}, d={d}")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    e_x = (k * math.log(d / k) + log_c_dk(d, k)) / gamma
    e_xp = k * math.log((d - 1 - k) * k)
    return e_x, e_xp


def extreme_neighbors(scores, k):
    """The four sign patterns: all +1, all -1, +1 on the top-k only, and its negation."""
    scores = as_scores(scores)
    top = np.zeros(scores.d, dtype=bool)
    top[scores.rank_to_index[:k]] = True
    on_top = np.where(top, 1.0, -1.0)
    return [np.ones(scores.d), -np.ones(scores.d), on_top, -on_top]


def _subset_log_probs(scores, k, epsilon, gamma, subsets):
    dist = exact_class_distribution(scores, k, epsilon, gamma)
    out = np.empty(len(subsets))
    for i, y in enumerate(subsets):
        c = classify_subset(y, scores)
        out[i] = dist.log_prob(c.h, c.t) - c.log_size
    return out


def dp_audit_exact(scores, k, epsilon, gamma, n_neighbors, rng, deltas=None, include_extremes=True):
    """Largest ``|log Pr[y | x] - log Pr[y | x + delta]|`` over subsets ``y``.

    Neighbours perturb each normalised score by at most 1. Probabilities come
    from the exact class distribution (Gumbel), split evenly within classes.
    """
    scores = as_scores(scores)
    total = math.comb(scores.d, k)
    if total > BRUTE_FORCE_LIMIT:
        raise DomainTooLarge(f"{total} subsets is too many to audit exactly")
    subsets = list(itertools.combinations(range(scores.d), k))
    base = _subset_log_probs(scores, k, epsilon, gamma, subsets)
    if deltas is None:
        deltas = [rng.uniform(-1.0, 1.0, scores.d) for _ in range(n_neighbors)]
        if include_extremes:
            deltas += extreme_neighbors(scores, k)
    worst = 0.0
    for delta in deltas:
        delta = np.asarray(delta, dtype=float)
        if np.abs(delta).max(initial=0.0) > 1.0:
            raise ValueError("neighbour perturbation exceeds 1 in some component")
        other = _subset_log_probs(as_scores(scores.raw + delta), k, epsilon, gamma, subsets)
        worst = max(worst, float(np.abs(base - other).max()))
    return worst


def dp_audit_mc(sampler, scores, delta, trials, rng, outcome=tuple):
    """Empirical log-ratio audit of a sampled mechanism on one neighbour pair.

    ``sampler(scores, rng, trials)`` returns a sequence of outcomes. Returns a
    list of ``(outcome, log_ratio, mc_error)`` over outcomes seen at least 50
    times under both inputs; ``mc_error`` is the delta-method standard error of
    the log ratio.
    """
    scores = as_scores(scores)
    other = as_scores(scores.raw + np.asarray(delta, dtype=float))
    counts = []
    for s in (scores, other):
        c = {}
        for o in sampler(s, rng, trials):
            key = outcome(o)
            c[key] = c.get(key, 0) + 1
        counts.append(c)
    rows = []
    for key in set(counts[0]) & set(counts[1]):
        a, b = counts[0][key], counts[1][key]
        if min(a, b) < 50:
            continue
        err = math.sqrt((1 - a / trials) / a + (1 - b / trials) / b)
        rows.append((key, math.log(a / b), err))
    return rows
