"""Noise distributions whose log-survival function is 1-Lipschitz.

Every sampler here goes through an inverse-CDF (quantile) path. Uniform draws
are carried in log space, ``log_u = log(U)``, so that the maximum of a group of
``exp(m)`` i.i.d. noise terms can be produced from a single draw as
``Q(U ** exp(-m))`` without ever forming ``U ** exp(-m)`` when ``m`` is large.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

# Below this |log p| the survival 1 - p is taken from its first-order expansion.
_ASYMPTOTIC_LOG_P = 1e-8
_LOG2 = math.log(2.0)
_TINY = np.finfo(float).tiny


class NoiseKind(str, enum.Enum):
    EXPONENTIAL = "exponential"
    GUMBEL = "gumbel"
    LAPLACE = "laplace"
    LOGISTIC = "logistic"
    HALF_LOGISTIC = "half-logistic"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        if key == "halflogistic":
            key = "half-logistic"
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown noise kind {value!r}; expected one of {choices}") from None


@dataclass(frozen=True)
class LogUniform:
    """A uniform draw raised to ``exp(-log_group_size)``, kept in log space.

    ``p = exp(log_u * exp(-log_group_size))`` is the largest of
    ``exp(log_group_size)`` i.i.d. uniforms when ``log_u`` is the log of one
    uniform.
    """

    log_u: float
    log_group_size: float = 0.0

    def __post_init__(self):
        if not self.log_u < 0.0:
            raise ValueError(f"log_u must be negative, got {self.log_u}")
        if not self.log_group_size >= 0.0:
            raise ValueError(f"log_group_size must be >= 0, got {self.log_group_size}")


def cdf(kind, x):
    """Standard CDF, used for Lipschitz checks and tests (not for sampling)."""
    kind = NoiseKind.parse(kind)
    x = np.asarray(x, dtype=float)
    if kind is NoiseKind.EXPONENTIAL:
        return np.where(x < 0, 0.0, -np.expm1(-np.maximum(x, 0.0)))
    if kind is NoiseKind.GUMBEL:
        return np.exp(-np.exp(-x))
    if kind is NoiseKind.LAPLACE:
        return np.where(x < 0, 0.5 * np.exp(-np.abs(x)), 1.0 - 0.5 * np.exp(-np.abs(x)))
    if kind is NoiseKind.LOGISTIC:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(-np.maximum(x, 0.0))
    return np.where(x < 0, 0.0, (1.0 - e) / (1.0 + e))


def log_survival(kind, x):
    """``log(1 - F(x))`` evaluated without cancellation."""
    kind = NoiseKind.parse(kind)
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", divide="ignore"):
        if kind is NoiseKind.EXPONENTIAL:
            return np.where(x < 0, 0.0, -np.maximum(x, 0.0))
        if kind is NoiseKind.GUMBEL:
            return np.log(-np.expm1(-np.exp(-x)))
        if kind is NoiseKind.LAPLACE:
            return np.where(x < 0, np.log1p(-0.5 * np.exp(-np.abs(x))), -_LOG2 - np.abs(x))
        if kind is NoiseKind.LOGISTIC:
            return -np.logaddexp(0.0, x)
        xp = np.maximum(x, 0.0)
        # 1 - F = 2 e^{-x} / (1 + e^{-x})
        return np.where(x < 0, 0.0, _LOG2 - xp - np.log1p(np.exp(-xp)))


def inv_cdf(kind, p):
    """Strictly increasing quantile function of the standard distribution."""
    kind = NoiseKind.parse(kind)
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if kind is NoiseKind.EXPONENTIAL:
        return -math.log1p(-p)
    if kind is NoiseKind.GUMBEL:
        return -math.log(-math.log(p))
    if kind is NoiseKind.LAPLACE:
        if p < 0.5:
            return math.log(2.0 * p)
        return -math.log(2.0 * (1.0 - p))
    if kind is NoiseKind.LOGISTIC:
        return math.log(p) - math.log1p(-p)
    return math.log1p(p) - math.log1p(-p)


def _quantile_from_logs(kind, log_p, log_neg_log_p):
    """Quantile given ``log p`` and ``log(-log p)`` (arrays, broadcast).

    Passing ``log(-log p)`` separately keeps the large-group regime exact: there
    ``log p`` underflows to ``-0.0`` while ``log(-log p)`` is a modest negative
    number.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        small = log_p > -_ASYMPTOTIC_LOG_P
        # log(1 - p) = log(-log p) + log1p(log p / 2 + ...) for tiny |log p|.
        log_1mp = np.where(
            small,
            log_neg_log_p + 0.5 * log_p,
            np.log(-np.expm1(np.minimum(log_p, -_ASYMPTOTIC_LOG_P))),
        )
        if kind is NoiseKind.EXPONENTIAL:
            return -log_1mp
        if kind is NoiseKind.GUMBEL:
            return -log_neg_log_p
        if kind is NoiseKind.LOGISTIC:
            return log_p - log_1mp
        if kind is NoiseKind.LAPLACE:
            return np.where(log_p < -_LOG2, _LOG2 + log_p, -_LOG2 - log_1mp)
        return np.log1p(np.exp(log_p)) - log_1mp


def quantile_of_group_max(kind, log_u, log_group_size):
    """Vectorised :func:`group_max_noise` over arrays of draws and group sizes."""
    kind = NoiseKind.parse(kind)
    log_u = np.asarray(log_u, dtype=float)
    m = np.asarray(log_group_size, dtype=float)
    if kind is NoiseKind.GUMBEL:
        return m - np.log(-log_u)
    log_neg_log_p = np.log(-log_u) - m
    log_p = -np.exp(log_neg_log_p)
    return _quantile_from_logs(kind, log_p, log_neg_log_p)


def group_max_noise(kind, lu):
    """Largest of ``exp(lu.log_group_size)`` i.i.d. noise terms from one draw.

    For Gumbel noise this is exactly ``m + inv_cdf(GUMBEL, exp(log_u))``.
    """
    return float(quantile_of_group_max(kind, lu.log_u, lu.log_group_size))


def draw_log_uniform(rng, size=None):
    """``log(U)`` for ``U ~ Unif(0, 1)``; equal in law to ``-Exp(1)``, never zero."""
    e = rng.standard_exponential(size)
    if size is None:
        return -max(float(e), _TINY)
    np.maximum(e, _TINY, out=e)
    return np.negative(e, out=e)


def sample_noise(kind, rng, size=None):
    """Plain i.i.d. draws via inverse transform sampling."""
    return quantile_of_group_max(kind, draw_log_uniform(rng, size), 0.0)


def top_order_noise(kind, group_size, kappa, rng):
    """The ``kappa`` largest of ``group_size`` i.i.d. noise terms, descending.

    Uses the descending record recursion U(n) = U^(1/n),
    U(n-1) = U(n) * V^(1/(n-1)), ... in log space.
    """
    kind = NoiseKind.parse(kind)
    group_size = int(group_size)
    kappa = int(kappa)
    if group_size < 1 or kappa < 1:
        raise ValueError("group_size and kappa must be positive")
    if kappa > group_size:
        raise ValueError(f"kappa={kappa} exceeds group_size={group_size}")
    neg_log_v = -draw_log_uniform(rng, kappa)
    n = group_size - np.arange(kappa, dtype=float)
    # -log U(i) accumulates -log V_i / (n - i); accumulate logs of those terms.
    log_terms = np.log(neg_log_v) - np.log(n)
    log_neg_log_p = np.logaddexp.accumulate(log_terms)
    log_p = -np.exp(log_neg_log_p)
    return [float(v) for v in _quantile_from_logs(kind, log_p, log_neg_log_p)]


def verify_lipschitz(kind, x_grid, c_grid):
    """Largest excess of ``|log S(x) - log S(x + c)|`` over ``|c|`` on a grid.

    Points where the survival function underflows are skipped. Returns 0 when
    the condition holds everywhere.
    """
    x = np.asarray(x_grid, dtype=float)[:, None]
    c = np.asarray(c_grid, dtype=float)[None, :]
    a = log_survival(kind, x)
    b = log_survival(kind, x + c)
    ok = np.isfinite(a) & np.isfinite(b)
    excess = np.abs(a - b) - np.abs(c)
    excess = np.where(ok, excess, 0.0)
    return float(max(0.0, excess.max(initial=0.0)))
