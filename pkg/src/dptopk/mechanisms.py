"""Additive-noise selection: the Lipschitz mechanism and its baselines.

Items are 0-based indices into ``ScoreVector.raw``. Scores are assumed to be
normalised by the scoring function's sensitivity, so ``delta_loss`` is 1 unless
the caller deliberately works with unnormalised scores.
"""

from dataclasses import dataclass

import numpy as np

from dptopk.noise import NoiseKind, draw_log_uniform, quantile_of_group_max
from dptopk.scores import as_scores


@dataclass(frozen=True)
class MechanismParams:
    epsilon: float
    delta_loss: float = 1.0
    kappa: int = 1
    noise: NoiseKind = NoiseKind.GUMBEL
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "noise", NoiseKind.parse(self.noise))
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.delta_loss > 0:
            raise ValueError(f"delta_loss must be positive, got {self.delta_loss}")
        if int(self.kappa) != self.kappa or self.kappa < 1:
            raise ValueError(f"kappa must be a positive integer, got {self.kappa}")

    @property
    def coefficient(self):
        """Multiplier applied to each score before adding noise."""
        return self.epsilon / (2.0 * self.kappa * self.delta_loss)

    def rng(self):
        return np.random.default_rng(self.seed)


def _top_kappa(z, kappa):
    """Indices of the ``kappa`` largest entries, descending, ties by index."""
    d = z.size
    if kappa == 1:
        return np.array([int(np.argmax(z))])
    if kappa < d:
        threshold = np.partition(z, d - kappa)[d - kappa]
        above = np.flatnonzero(z > threshold)
        tied = np.flatnonzero(z == threshold)[: kappa - above.size]
        cand = np.concatenate([above, tied])
    else:
        cand = np.arange(d)
    return cand[np.lexsort((cand, -z[cand]))]


def _noisy_scores(raw, coefficient, noise, rng, size=None):
    shape = raw.shape if size is None else (size,) + raw.shape
    return coefficient * raw + quantile_of_group_max(noise, draw_log_uniform(rng, shape), 0.0)


def lipschitz_select(scores, params, rng=None):
    """Report the ``params.kappa`` items with the largest noisy scores.

    Each item gets ``Z_i = eps / (2 kappa delta) * x_i + Q(U_i)``. The result
    is ordered by descending noisy score.
    """
    scores = as_scores(scores)
    if params.kappa > scores.d:
        raise ValueError(f"kappa={params.kappa} exceeds d={scores.d}")
    rng = params.rng() if rng is None else rng
    z = _noisy_scores(scores.raw, params.coefficient, params.noise, rng)
    return [int(i) for i in _top_kappa(z, params.kappa)]


def lipschitz_select_batch(scores, params, rng, size):
    """``size`` independent runs of :func:`lipschitz_select` as a ``(size, kappa)`` array."""
    scores = as_scores(scores)
    if params.kappa > scores.d:
        raise ValueError(f"kappa={params.kappa} exceeds d={scores.d}")
    z = _noisy_scores(scores.raw, params.coefficient, params.noise, rng, size)
    if params.kappa == 1:
        return np.argmax(z, axis=1)[:, None]
    return np.argsort(-z, axis=1, kind="stable")[:, : params.kappa]


def peel(scores, k, epsilon, delta_loss=1.0, noise=NoiseKind.GUMBEL, rng=None):
    """PEELING: ``k`` rounds of single-item selection at ``epsilon / k`` each.

    The winner of each round is removed before the next. Output order is
    selection order.
    """
    scores = as_scores(scores)
    k = int(k)
    if not 1 <= k <= scores.d:
        raise ValueError(f"k must lie in [1, d={scores.d}], got {k}")
    params = MechanismParams(epsilon / k, delta_loss, 1, noise)
    rng = np.random.default_rng() if rng is None else rng
    remaining = np.arange(scores.d)
    picked = []
    for _ in range(k):
        z = _noisy_scores(scores.raw[remaining], params.coefficient, params.noise, rng)
        pos = int(np.argmax(z))
        picked.append(int(remaining[pos]))
        remaining = np.delete(remaining, pos)
    return picked


def peel_gumbel_batch(scores, k, epsilon, rng, size, delta_loss=1.0):
    """Gumbel PEELING sampled as one noisy top-k pass per run.

    With Gumbel noise, ``k`` exponential-mechanism rounds at ``epsilon / k``
    have the same output law (as an ordered list) as reporting the top-k of a
    single Gumbel-perturbed pass with coefficient ``epsilon / (2 k delta)``.
    That costs O(d) per run instead of O(dk).
    """
    params = MechanismParams(epsilon, delta_loss, k, NoiseKind.GUMBEL)
    return lipschitz_select_batch(scores, params, rng, size)


def oneshot(scores, k, epsilon, delta_loss=1.0, noise=NoiseKind.EXPONENTIAL, rng=None):
    """ONESHOT: a single noisy pass reporting the top ``k`` at full ``epsilon``."""
    return lipschitz_select(scores, MechanismParams(epsilon, delta_loss, k, noise), rng)


def permute_and_flip_ref(scores, epsilon, delta_loss=1.0, rng=None):
    """Permute-and-flip by explicit rejection, kept as a distributional oracle."""
    scores = as_scores(scores)
    rng = np.random.default_rng() if rng is None else rng
    q = (epsilon / (2.0 * delta_loss)) * scores.raw
    order = rng.permutation(scores.d)
    # One coin per visited item; the maximiser's coin always comes up heads.
    accept = rng.random(scores.d) < np.exp(q[order] - q.max())
    return int(order[np.argmax(accept)])


def effective_sensitivity(delta_minus, delta_plus):
    """Symmetric sensitivity for a shift-invariant mechanism.

    A score that can drop by ``delta_minus`` or rise by ``delta_plus`` per user
    behaves like one with sensitivity ``(delta_minus + delta_plus) / 2``; the
    accompanying constant shift does not change any argmax.
    """
    if delta_minus < 0 or delta_plus < 0:
        raise ValueError("sensitivities must be nonnegative")
    if delta_minus == 0 and delta_plus == 0:
        raise ValueError("scoring function with zero sensitivity")
    return (delta_minus + delta_plus) / 2.0
