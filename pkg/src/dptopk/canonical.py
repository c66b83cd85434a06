"""Canonical Lipschitz mechanism for direct k-subset selection.

A k-subset ``y`` belongs to utility class ``(h, t)`` when it contains the items
ranked ``1..h``, misses rank ``h + 1`` and its worst-ranked member has rank
``t`` (ranks are 1-based, ``h`` counts items). The top-k itself is the single
member of class ``(k - 1, k)``. All members of a class share the canonical loss

    LOSS(y) = (1 - gamma) * x_(h+1) - gamma * x_(t)

so the mechanism only has to draw one group-maximum noise term per class,
``1 + k (d - k)`` classes in total, or one per ``t`` when ``gamma == 1``.
"""

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import gammaln, logsumexp

from dptopk.noise import NoiseKind, draw_log_uniform, quantile_of_group_max
from dptopk.scores import as_scores

# Cells of (trial x class) noise generated per numpy call.
_CELL_BUDGET = 1 << 21
_EXACT_COMB_LIMIT = 2000


class UnsupportedOperation(NotImplementedError):
    pass


@dataclass(frozen=True)
class UtilityClass:
    """Class ``(h, t)``; ``h`` is ``None`` when only ``t`` is known (gamma = 1)."""

    h: int | None
    t: int
    log_size: float

    @classmethod
    def of(cls, h, t, k):
        return cls(h, t, log_class_size(h, t, k))

    @property
    def key(self):
        return (self.h, self.t)


@dataclass(frozen=True)
class Selection:
    subset: tuple
    cls: UtilityClass
    loss: float
    noisy_value: float


def _log_comb(n, r):
    if r < 0 or r > n:
        raise ValueError(f"invalid binomial ({n} choose {r})")
    if n <= _EXACT_COMB_LIMIT:
        return math.log(math.comb(n, r))
    return float(gammaln(n + 1) - gammaln(r + 1) - gammaln(n - r + 1))


def check_class(h, t, k, d=None):
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if not 0 <= h <= k - 1:
        raise ValueError(f"h={h} outside [0, {k - 1}]")
    if t < k or (d is not None and t > d):
        raise ValueError(f"t={t} outside [{k}, {d if d is not None else 'd'}]")
    if t == k and h != k - 1:
        raise ValueError(f"t=k={k} requires h=k-1, got h={h}")


def log_class_size(h, t, k):
    """``log |C_{h,t}| = log C(t - h - 2, k - 1 - h)``, and 0 for ``(k-1, k)``."""
    check_class(h, t, k)
    if t == k:
        return 0.0
    return _log_comb(t - h - 2, k - 1 - h)


def log_class_size_sum(t, k):
    """``log sum_h |C_{h,t}| = log C(t - 1, k - 1)``."""
    if k < 1 or t < k:
        raise ValueError(f"need 1 <= k <= t, got k={k}, t={t}")
    return _log_comb(t - 1, k - 1)


def class_loss(h, t, gamma, scores):
    """Canonical loss ``(1 - gamma) x_(h+1) - gamma x_(t)`` on normalised scores."""
    scores = as_scores(scores)
    if not 0 <= h < t <= scores.d:
        raise ValueError(f"invalid class (h={h}, t={t}) for d={scores.d}")
    return (1.0 - gamma) * scores.x(h + 1) - gamma * scores.x(t)


def classify_subset(subset, scores):
    """Utility class ``(h, t)`` of a subset of item indices."""
    scores = as_scores(scores)
    items = np.unique(np.asarray(list(subset), dtype=np.int64))
    k = items.size
    if k != len(subset) or k == 0:
        raise ValueError("subset must hold distinct item indices")
    if items[0] < 0 or items[-1] >= scores.d:
        raise ValueError("subset index out of range")
    if k >= scores.d:
        raise ValueError(f"subset size {k} must be below d={scores.d}")
    ranks = np.sort(scores.index_to_rank[items]) + 1
    t = int(ranks[-1])
    # h = number of leading ranks 1, 2, ... present, capped at k - 1.
    gaps = np.flatnonzero(ranks != np.arange(1, k + 1))
    h = int(gaps[0]) if gaps.size else k - 1
    return UtilityClass(h, t, log_class_size(h, t, k))


def _check_args(scores, k, epsilon, gamma):
    d = scores.d
    if not 1 <= k <= d - 1:
        raise ValueError(f"k must lie in [1, d - 1] = [1, {d - 1}], got {k}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")


def n_classes(d, k, gamma_is_one=False):
    return d - k + 1 if gamma_is_one else 1 + k * (d - k)


@lru_cache(maxsize=32)
def _merged_log_sizes(d, k):
    ts = np.arange(k, d + 1)
    # m_{t+1} = m_t + log t - log(t - k + 1)
    steps = np.log(ts[:-1].astype(float)) - np.log((ts[:-1] - k + 1).astype(float))
    log_size = np.concatenate([[0.0], np.cumsum(steps)])
    out = (ts, log_size, np.full(ts.size, -1))
    for a in out:
        a.flags.writeable = False
    return out


def iter_class_blocks(scores, k, gamma, max_cells=_CELL_BUDGET, merge_t=None):
    """Classes in sweep order with log sizes from the binomial recurrences.

    Yields ``(h, t, log_size, utility)`` arrays, where ``utility`` is the
    negated canonical loss. Order: ``(k-1, k)`` first, then ``t`` ascending
    and, within each ``t``, ``h`` descending. For ``gamma == 1`` the classes
    of one ``t`` share a loss and are merged (unless ``merge_t`` is False);
    ``h`` is then ``-1`` and ``log_size`` is ``log C(t - 1, k - 1)``.

    Within a row ``t``, stepping ``h`` down by one multiplies the class size by
    ``(t - h - 2) / (k - 1 - h)``, i.e. C(n+1, r+1) = C(n, r) (n+1)/(r+1).
    Across ``t`` (gamma = 1) C(n+1, r) = C(n, r) (n+1)/(n+1-r).
    """
    scores = as_scores(scores)
    d = scores.d
    x = scores.sorted
    if merge_t is None:
        merge_t = gamma == 1.0
    if merge_t:
        ts, log_size, minus_one = _merged_log_sizes(d, k)
        step = max(1, max_cells)
        for lo in range(0, ts.size, step):
            sl = slice(lo, lo + step)
            yield minus_one[sl], ts[sl], log_size[sl], x[k - 1 :][sl]
        return

    log_int = np.log(np.arange(1, d + 1, dtype=float))  # log_int[n - 1] = log n
    # j = k - 1 - h runs 0..k-1 along a row, i.e. h descending.
    j = np.arange(k)
    h_row = k - 1 - j
    neg_loss_h = -(1.0 - gamma) * x[h_row]  # uses x_(h+1) = x[h] (0-based)
    yield (
        np.array([k - 1]),
        np.array([k]),
        np.array([0.0]),
        np.array([gamma * x[k - 1] - (1.0 - gamma) * x[k - 1]]),
    )
    rows = max(1, max_cells // k)
    log_j = log_int[j[1:] - 1]
    for t0 in range(k + 1, d + 1, rows):
        t = np.arange(t0, min(d + 1, t0 + rows))
        # log of (t - h - 2) = t - k - 1 + j for j >= 1
        num = log_int[(t[:, None] - k - 1 + j[None, 1:]) - 1]
        log_size = np.zeros((t.size, k))
        np.cumsum(num - log_j[None, :], axis=1, out=log_size[:, 1:])
        utility = gamma * x[t - 1][:, None] + neg_loss_h[None, :]
        yield (
            np.broadcast_to(h_row, (t.size, k)).ravel(),
            np.repeat(t, k),
            log_size.ravel(),
            utility.ravel(),
        )


def sample_class_batch(scores, k, epsilon, gamma, noise, rng, size):
    """Run the class arg-max sweep ``size`` times independently.

    Returns arrays ``(h, t, value)``; ``h`` is ``-1`` on the gamma = 1 path.
    Each class receives ``Q(U ** (1 / |C|))`` via the group-maximum trick.
    """
    scores = as_scores(scores)
    _check_args(scores, k, epsilon, gamma)
    noise = NoiseKind.parse(noise)
    total = n_classes(scores.d, k, gamma == 1.0)
    half_eps = 0.5 * epsilon
    if gamma == 1.0 and size * total <= _CELL_BUDGET:
        # One block, one numpy pass; same draws as the chunked loop below.
        ts, log_size, minus_one = _merged_log_sizes(scores.d, k)
        v = quantile_of_group_max(noise, draw_log_uniform(rng, (size, total)), log_size)
        v += half_eps * scores.sorted[k - 1 :]
        arg = v.argmax(axis=1)
        return minus_one[arg], ts[arg], v[np.arange(size), arg]
    chunk = max(1, _CELL_BUDGET // min(total, _CELL_BUDGET))
    block_cells = max(1, _CELL_BUDGET // chunk)
    cached = list(iter_class_blocks(scores, k, gamma, block_cells)) if total <= 4 * _CELL_BUDGET else None

    out_h = np.empty(size, dtype=np.int64)
    out_t = np.empty(size, dtype=np.int64)
    out_v = np.empty(size)
    for lo in range(0, size, chunk):
        n = min(chunk, size - lo)
        best_v = np.full(n, -np.inf)
        best_h = np.zeros(n, dtype=np.int64)
        best_t = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        blocks = cached if cached is not None else iter_class_blocks(scores, k, gamma, block_cells)
        for h, t, log_size, utility in blocks:
            log_u = draw_log_uniform(rng, (n, h.size))
            v = half_eps * utility + quantile_of_group_max(noise, log_u, log_size)
            arg = np.argmax(v, axis=1)
            bv = v[rows, arg]
            better = bv > best_v
            best_v = np.where(better, bv, best_v)
            best_h = np.where(better, h[arg], best_h)
            best_t = np.where(better, t[arg], best_t)
        out_h[lo : lo + n] = best_h
        out_t[lo : lo + n] = best_t
        out_v[lo : lo + n] = best_v
    return out_h, out_t, out_v


def sample_class(scores, k, epsilon, gamma, noise=NoiseKind.GUMBEL, rng=None):
    """One draw of the winning class and its noisy value.

    Runs in O(dk) for gamma < 1 and O(d) for gamma == 1; in the latter case the
    returned class carries only ``t`` (``h is None``).
    """
    rng = np.random.default_rng() if rng is None else rng
    h, t, v = sample_class_batch(scores, k, epsilon, gamma, noise, rng, 1)
    h, t = int(h[0]), int(t[0])
    if h < 0:
        return UtilityClass(None, t, log_class_size_sum(t, k)), float(v[0])
    return UtilityClass(h, t, log_class_size(h, t, k)), float(v[0])


def _floyd(n, r, rng):
    picks = rng.integers(0, np.arange(n - r + 1, n + 1)).tolist()
    chosen = set()
    for j, pick in zip(range(n - r, n), picks):
        chosen.add(j if pick in chosen else pick)
    return chosen


def _uniform_subset(n, r, rng):
    """Uniform ``r``-subset of ``range(n)`` as a sorted array.

    Floyd's algorithm on whichever of the subset and its complement is smaller.
    """
    if 2 * r > n:
        keep = np.ones(n, dtype=bool)
        keep[list(_floyd(n, n - r, rng))] = False
        return np.flatnonzero(keep)
    return np.sort(np.fromiter(_floyd(n, r, rng), dtype=np.int64, count=r))


def _member_ranks(cls, k, d, gamma_is_one, rng):
    """Sorted 1-based ranks of a uniform member of ``cls``."""
    t = cls.t
    if gamma_is_one:
        if not k <= t <= d:
            raise ValueError(f"t={t} outside [{k}, {d}]")
        if t == k:
            return np.arange(1, k + 1)
        return np.append(_uniform_subset(t - 1, k - 1, rng) + 1, t)
    h = cls.h
    if h is None:
        raise ValueError("class lacks h; pass gamma_is_one=True")
    check_class(h, t, k, d)
    if t == k:
        return np.arange(1, k + 1)
    body = _uniform_subset(t - h - 2, k - 1 - h, rng) + h + 2
    return np.concatenate([np.arange(1, h + 1), body, [t]])


def _leading_run(ranks):
    """``h`` of a sorted rank array: how many of ranks 1, 2, ... it starts with."""
    miss = ranks != np.arange(1, ranks.size + 1)
    return int(miss.argmax()) if miss.any() else ranks.size - 1


def sample_member(cls, k, scores, gamma_is_one, rng):
    """Uniformly random subset from class ``cls``, as sorted item indices.

    With ``gamma_is_one`` only ``cls.t`` is used and the subset is uniform over
    the union of the classes ``(0, t), ..., (k-1, t)``.
    """
    scores = as_scores(scores)
    ranks = _member_ranks(cls, k, scores.d, gamma_is_one, rng)
    return tuple(np.sort(scores.items_at_ranks(ranks)).tolist())


def canonical_select(scores, k, epsilon, gamma=0.5, noise=NoiseKind.GUMBEL, rng=None):
    """Sample a k-subset from the Canonical Lipschitz mechanism."""
    scores = as_scores(scores)
    rng = np.random.default_rng() if rng is None else rng
    drawn, value = sample_class(scores, k, epsilon, gamma, noise, rng)
    ranks = _member_ranks(drawn, k, scores.d, gamma == 1.0, rng)
    subset = tuple(np.sort(scores.items_at_ranks(ranks)).tolist())
    if drawn.h is None:
        h = _leading_run(ranks)
        drawn = UtilityClass(h, drawn.t, log_class_size(h, drawn.t, k))
    return Selection(subset, drawn, class_loss(drawn.h, drawn.t, gamma, scores), value)


@dataclass(frozen=True)
class ClassDistribution:
    """Exact class probabilities under Gumbel noise.

    ``log_probs[h, t - k]`` holds ``log Pr[class (h, t)]``; invalid cells are
    ``-inf``.
    """

    log_probs: np.ndarray
    k: int
    gamma: float
    epsilon: float

    @property
    def d(self):
        return self.k + self.log_probs.shape[1] - 1

    def log_prob(self, h, t):
        check_class(h, t, self.k, self.d)
        return float(self.log_probs[h, t - self.k])

    @cached_property
    def entries(self):
        hs, ts = np.nonzero(np.isfinite(self.log_probs))
        return {(int(h), int(t) + self.k): float(self.log_probs[h, t]) for h, t in zip(hs, ts)}

    def log_t_marginal(self):
        """``log Pr[t]`` for ``t = k..d``."""
        return logsumexp(self.log_probs, axis=0)

    def log_total(self):
        return float(logsumexp(self.log_probs))


def exact_class_distribution(scores, k, epsilon, gamma, noise=NoiseKind.GUMBEL):
    """Exact class probabilities ``Pr[C_{h,t}] ∝ |C_{h,t}| exp(-eps LOSS / 2)``.

    Only the Gumbel instantiation has this closed form.
    """
    if NoiseKind.parse(noise) is not NoiseKind.GUMBEL:
        raise UnsupportedOperation("exact class probabilities exist only for Gumbel noise")
    scores = as_scores(scores)
    _check_args(scores, k, epsilon, gamma)
    d = scores.d
    log_w = np.full((k, d - k + 1), -np.inf)
    for h, t, log_size, utility in iter_class_blocks(scores, k, gamma, merge_t=False):
        log_w[h, t - k] = log_size + 0.5 * epsilon * utility
    log_w -= logsumexp(log_w)
    return ClassDistribution(log_w, k, float(gamma), float(epsilon))


def exact_t_marginal(scores, k, epsilon):
    """``log Pr[t]`` for CANONICAL with gamma = 1, in O(d)."""
    scores = as_scores(scores)
    _check_args(scores, k, epsilon, 1.0)
    (_, t, log_size, utility), = list(iter_class_blocks(scores, k, 1.0, max_cells=scores.d))
    log_w = log_size + 0.5 * epsilon * utility
    return t, log_w - logsumexp(log_w)
