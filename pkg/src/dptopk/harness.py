"""Data loading, synthetic data, experiment sweeps and benchmarks."""

import csv
import logging
import math
import os
import statistics
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from dptopk.analysis import Predicate, PredicateKind, classify_rank_batch, predicate_probability
from dptopk.canonical import (
    canonical_select,
    exact_class_distribution,
    sample_class_batch,
)
from dptopk.mechanisms import (
    MechanismParams,
    effective_sensitivity,
    lipschitz_select,
    lipschitz_select_batch,
    peel,
    peel_gumbel_batch,
)
from dptopk.noise import NoiseKind
from dptopk.scores import ScoreVector

log = logging.getLogger(__name__)

MECHANISMS = ("canonical", "canonical-g1", "peeling", "oneshot", "lipschitz")
DEFAULT_NOISE = {
    "canonical": NoiseKind.GUMBEL,
    "canonical-g1": NoiseKind.GUMBEL,
    "peeling": NoiseKind.GUMBEL,
    "oneshot": NoiseKind.EXPONENTIAL,
    "lipschitz": NoiseKind.GUMBEL,
}
ZIPF_SCALE = 1.5e8
ZIPF_D = 10_000
MC_CHUNK = 1000
# Upper bound on (trials x d) noise cells per numpy call in batched sampling.
_BATCH_CELLS = 1 << 20


class LoadError(ValueError):
    pass


def load_scores(path, fmt="lines", delta_minus=1.0, delta_plus=1.0):
    """Read raw scores and normalise them by the effective sensitivity.

    ``fmt`` is ``"lines"`` (one number per line; blank lines and ``#`` comments
    skipped) or ``"csv:<column>"``.
    """
    values = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            if fmt == "lines":
                for lineno, line in enumerate(fh, 1):
                    text = line.strip()
                    if not text or text.startswith("#"):
                        continue
                    values.append(_parse_value(text, lineno))
            elif fmt.startswith("csv:"):
                column = fmt[4:]
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or column not in reader.fieldnames:
                    raise LoadError(f"{path}: no column {column!r}")
                for row in reader:
                    values.append(_parse_value(row[column] or "", reader.line_num))
            else:
                raise LoadError(f"unknown format {fmt!r}; use 'lines' or 'csv:<column>'")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc.strerror}") from exc
    if not values:
        raise LoadError(f"{path}: no scores found")
    return ScoreVector.from_raw(values, effective_sensitivity(delta_minus, delta_plus))


def _parse_value(text, lineno):
    try:
        v = float(text)
    except ValueError:
        raise LoadError(f"line {lineno}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise LoadError(f"line {lineno}: non-finite value {text!r}")
    return v


def zipf_values(d, s, scale=ZIPF_SCALE):
    if d < 2:
        raise ValueError(f"d must be at least 2, got {d}")
    if s < 0:
        raise ValueError(f"s must be nonnegative, got {s}")
    f = np.arange(1, d + 1, dtype=float) ** (-s)
    return scale * f / f.sum()


def gen_zipf(d=ZIPF_D, s=0.0, scale=ZIPF_SCALE, sensitivity=1.0):
    """Scores ``scale * i^-s / sum_j j^-s`` for items ``i = 1..d``."""
    return ScoreVector.from_raw(zipf_values(d, s, scale), sensitivity)


@dataclass
class ExperimentSpec:
    mechanisms: list
    k: int
    epsilons: list
    input_path: str | None = None
    input_format: str = "lines"
    zipf_d: int = ZIPF_D
    zipf_s: float = 0.0
    zipf_scale: float = ZIPF_SCALE
    gamma: float = 0.5
    noise: NoiseKind | None = None
    trials: int = 10_000
    seed: int = 0
    predicates: list = field(default_factory=lambda: ["TOP", "GREAT", "GOOD"])
    delta_minus: float = 1.0
    delta_plus: float = 1.0
    exact: bool = True
    timing: bool = True
    bench_runs: int = 10

    def __post_init__(self):
        if not self.epsilons:
            raise ValueError("at least one epsilon is required")
        if any(not e > 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        for m in self.mechanisms:
            if m not in MECHANISMS:
                raise ValueError(f"unknown mechanism {m!r}; expected one of {', '.join(MECHANISMS)}")
        if self.noise is not None:
            self.noise = NoiseKind.parse(self.noise)
        self.predicates = [PredicateKind(p.upper()).value for p in self.predicates]

    def load(self):
        if self.input_path is not None:
            scores = load_scores(self.input_path, self.input_format, self.delta_minus, self.delta_plus)
        else:
            sens = effective_sensitivity(self.delta_minus, self.delta_plus)
            scores = gen_zipf(self.zipf_d, self.zipf_s, self.zipf_scale, sens)
        if not 1 <= self.k <= scores.d - 1:
            raise ValueError(f"k={self.k} outside [1, d - 1] for d={scores.d}")
        return scores

    def noise_for(self, mechanism):
        return self.noise if self.noise is not None else DEFAULT_NOISE[mechanism]

    def gamma_for(self, mechanism):
        return 1.0 if mechanism == "canonical-g1" else self.gamma


@dataclass(frozen=True)
class Row:
    mechanism: str
    epsilon: float
    predicate: str
    probability: float
    std_err: float
    wall_time_ns: int

    FIELDS = ("mechanism", "epsilon", "predicate", "probability", "std_err", "wall_time_ns")

    def as_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}


def select_once(mechanism, scores, k, epsilon, gamma, noise, rng):
    """One run of ``mechanism``; returns sorted item indices and the noisy value (or None)."""
    if mechanism in ("canonical", "canonical-g1"):
        sel = canonical_select(scores, k, epsilon, gamma, noise, rng)
        return sel.subset, sel.noisy_value
    if mechanism == "peeling":
        return tuple(sorted(peel(scores, k, epsilon, 1.0, noise, rng))), None
    return tuple(sorted(lipschitz_select(scores, MechanismParams(epsilon, 1.0, k, noise), rng))), None


def _h_given_t(t_values, k, rng):
    """Draw ``h`` for CANONICAL_{gamma=1} outputs given their worst rank ``t``.

    Within the group of ``t`` the output is uniform, so ``Pr[h | t]`` is
    proportional to ``C(t - h - 2, k - 1 - h)`` (and ``h = k - 1`` when ``t = k``).
    """
    h = np.full(t_values.size, k - 1, dtype=np.int64)
    hs = np.arange(k)
    for t in np.unique(t_values):
        if t == k:
            continue
        idx = np.flatnonzero(t_values == t)
        n, r = t - hs - 2, k - 1 - hs
        lw = gammaln(n + 1.0) - gammaln(r + 1.0) - gammaln(n - r + 1.0)
        p = np.exp(lw - logsumexp(lw))
        h[idx] = rng.choice(k, size=idx.size, p=p / p.sum())
    return h


def sample_classes(mechanism, scores, k, epsilon, gamma, noise, rng, size):
    """``size`` independent outputs of ``mechanism`` reduced to their ``(h, t)``."""
    if mechanism in ("canonical", "canonical-g1"):
        h, t, _ = sample_class_batch(scores, k, epsilon, gamma, noise, rng, size)
        if gamma == 1.0:
            h = _h_given_t(t, k, rng)
        return h, t
    if mechanism == "peeling" and noise is not NoiseKind.GUMBEL:
        hs, ts = np.empty(size, dtype=np.int64), np.empty(size, dtype=np.int64)
        for i in range(size):
            ranks = scores.index_to_rank[peel(scores, k, epsilon, 1.0, noise, rng)]
            hh, tt = classify_rank_batch(ranks[None, :], k)
            hs[i], ts[i] = hh[0], tt[0]
        return hs, ts
    rows = max(1, _BATCH_CELLS // scores.d)
    hs, ts = [], []
    for lo in range(0, size, rows):
        n = min(rows, size - lo)
        if mechanism == "peeling":
            items = peel_gumbel_batch(scores, k, epsilon, rng, n)
        else:
            items = lipschitz_select_batch(scores, MechanismParams(epsilon, 1.0, k, noise), rng, n)
        hh, tt = classify_rank_batch(scores.index_to_rank[items], k)
        hs.append(hh)
        ts.append(tt)
    return np.concatenate(hs), np.concatenate(ts)


def stream(seed, *key):
    """Independent generator for ``key`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def _mechanism_key(mechanism):
    return zlib.crc32(mechanism.encode())


def worker_count():
    env = os.environ.get("DPTOPK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer DPTOPK_THREADS=%r", env)
    return os.cpu_count() or 1


def _mc_counts(spec, mechanism, scores, eps_index, epsilon, preds):
    gamma, noise = spec.gamma_for(mechanism), spec.noise_for(mechanism)
    chunks = [(lo, min(MC_CHUNK, spec.trials - lo)) for lo in range(0, spec.trials, MC_CHUNK)]

    def run(chunk):
        lo, n = chunk
        rng = stream(spec.seed, _mechanism_key(mechanism), eps_index, lo // MC_CHUNK)
        h, t = sample_classes(mechanism, scores, spec.k, epsilon, gamma, noise, rng, n)
        return [int(np.count_nonzero((h >= p.min_h) & (t <= p.max_t))) for p in preds]

    workers = min(worker_count(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return np.sum(results, axis=0)


def _time_one(spec, mechanism, scores, epsilon, eps_index):
    if not spec.timing:
        return 0
    rng = stream(spec.seed, _mechanism_key(mechanism), eps_index, 1 << 30)
    gamma, noise = spec.gamma_for(mechanism), spec.noise_for(mechanism)
    start = time.perf_counter_ns()
    select_once(mechanism, scores, spec.k, epsilon, gamma, noise, rng)
    return time.perf_counter_ns() - start


def uses_exact(spec, mechanism):
    if not spec.exact or mechanism not in ("canonical", "canonical-g1"):
        return False
    if spec.noise_for(mechanism) is not NoiseKind.GUMBEL:
        log.warning(
            "%s with %s noise has no exact class distribution; using Monte Carlo",
            mechanism,
            spec.noise_for(mechanism).value,
        )
        return False
    return True


def run_sweep(spec, scores=None):
    """Predicate probabilities for every (mechanism, epsilon, predicate).

    CANONICAL with Gumbel noise is evaluated exactly; everything else by Monte
    Carlo over ``spec.trials`` runs. Rows come back sorted.
    """
    scores = spec.load() if scores is None else scores
    preds = [Predicate(p, spec.k) for p in spec.predicates]
    rows = []
    for mechanism in spec.mechanisms:
        exact = uses_exact(spec, mechanism)
        for ei, eps in enumerate(spec.epsilons):
            wall = _time_one(spec, mechanism, scores, eps, ei)
            if exact:
                dist = exact_class_distribution(scores, spec.k, eps, spec.gamma_for(mechanism))
                for p in preds:
                    rows.append(Row(mechanism, eps, str(p), predicate_probability(dist, p), 0.0, wall))
            else:
                counts = _mc_counts(spec, mechanism, scores, ei, eps, preds)
                for p, c in zip(preds, counts):
                    ph = c / spec.trials
                    se = math.sqrt(ph * (1.0 - ph) / spec.trials)
                    rows.append(Row(mechanism, eps, str(p), ph, se, wall))
    rows.sort(key=lambda r: (r.mechanism, r.epsilon, r.predicate))
    return rows


@dataclass(frozen=True)
class BenchRow:
    mechanism: str
    d: int
    k: int
    median_ns: int
    runs: int

    FIELDS = ("mechanism", "d", "k", "median_ns", "runs")

    def as_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}


def bench(spec, scores=None, warmups=2):
    """Median single-run time per mechanism at the first epsilon.

    Scores are sorted before timing starts.
    """
    scores = spec.load() if scores is None else scores
    runs = max(10, spec.bench_runs)
    eps = spec.epsilons[0]
    out = []
    for mechanism in spec.mechanisms:
        gamma, noise = spec.gamma_for(mechanism), spec.noise_for(mechanism)
        rng = stream(spec.seed, _mechanism_key(mechanism), 1 << 31)
        for _ in range(warmups):
            select_once(mechanism, scores, spec.k, eps, gamma, noise, rng)
        times = []
        for _ in range(runs):
            start = time.perf_counter_ns()
            select_once(mechanism, scores, spec.k, eps, gamma, noise, rng)
            times.append(time.perf_counter_ns() - start)
        out.append(BenchRow(mechanism, scores.d, spec.k, int(statistics.median(times)), runs))
    return out


def runtime_model_spread(rows, model):
    """max/min of measured time over the model prediction across bench rows.

    ``model`` is ``"dk"`` or ``"d"``; 1.0 means perfectly proportional.
    """
    ratios = [r.median_ns / (r.d * r.k if model == "dk" else r.d) for r in rows]
    return max(ratios) / min(ratios)
