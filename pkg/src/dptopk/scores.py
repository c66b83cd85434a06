"""Normalised score vectors and their descending order statistics."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ScoreVector:
    """Scores already divided by their sensitivity, plus a descending ranking.

    Item indices are 0-based. Rank ``r`` (0-based) belongs to item
    ``rank_to_index[r]`` and has score ``sorted[r]``. Equal scores are ranked by
    ascending item index.
    """

    raw: np.ndarray
    rank_to_index: np.ndarray = field(repr=False)
    sorted: np.ndarray = field(repr=False)
    index_to_rank: np.ndarray = field(repr=False)

    @classmethod
    def from_raw(cls, raw, sensitivity=1.0):
        raw = np.array(raw, dtype=float).ravel()
        if raw.size == 0:
            raise ValueError("score vector is empty")
        if not np.all(np.isfinite(raw)):
            raise ValueError("scores must be finite")
        if not sensitivity > 0:
            raise ValueError(f"sensitivity must be positive, got {sensitivity}")
        if sensitivity != 1.0:
            raw = raw / sensitivity
        order = np.argsort(-raw, kind="stable")
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        for a in (raw, order, inverse):
            a.setflags(write=False)
        srt = raw[order]
        srt.setflags(write=False)
        return cls(raw=raw, rank_to_index=order, sorted=srt, index_to_rank=inverse)

    @property
    def d(self):
        return int(self.raw.size)

    def shifted(self, c):
        return ScoreVector.from_raw(self.raw + c)

    def x(self, rank):
        """Score of 1-based rank ``rank``, i.e. the order statistic x_(rank)."""
        return float(self.sorted[rank - 1])

    def items_at_ranks(self, ranks):
        """Item indices for 1-based ranks."""
        return self.rank_to_index[np.asarray(ranks, dtype=np.int64) - 1]


def as_scores(scores):
    return scores if isinstance(scores, ScoreVector) else ScoreVector.from_raw(scores)
