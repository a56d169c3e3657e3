"""Full-ranking HR@k / NDCG@k evaluation under the leave-one-out protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .data import SplitDataset, pad_left

KS = (5, 10)


class Scorer(Protocol):
    max_len: int

    def score(self, ids: np.ndarray) -> np.ndarray:
        """Scores [B, V+1] for a batch of left-padded contexts [B, max_len]."""


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    user_count: int
    split: str

    def summary(self) -> str:
        lines = [f"split: {self.split}", f"users: {self.user_count}"]
        for k in KS:
            lines.append(f"HR@{k}: {self.hr[k]:.4f}")
        for k in KS:
            lines.append(f"NDCG@{k}: {self.ndcg[k]:.4f}")
        return "\n".join(lines)


def hr_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank+1) inside the cutoff (ideal DCG is 1)."""
    if rank < 1:
        raise ValueError("ranks start at 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def ranking(scores: np.ndarray) -> np.ndarray:
    """Real item ids (1..V) ordered best first; ties go to the smaller id."""
    ids = np.arange(1, len(scores))
    return ids[np.lexsort((ids, -scores[1:]))]


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target among real items under the ranking() order."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    t_scores = scores[np.arange(len(targets)), targets][:, None]
    real = scores[:, 1:]
    ids = np.arange(1, scores.shape[1])[None, :]
    above = (real > t_scores).sum(axis=1)
    tied_before = ((real == t_scores) & (ids < targets[:, None])).sum(axis=1)
    return 1 + above + tied_before


def rank_items(context: list[int], model: Scorer) -> np.ndarray:
    """Score vector over the whole vocabulary for one user context (index 0 is -inf)."""
    if len(context) == 0:
        raise ValueError("cannot rank items for an empty context")
    ids = pad_left(list(context), model.max_len)[None, :]
    return model.score(ids)[0]


def evaluate_split(model: Scorer, split: SplitDataset, which: str, batch_size: int = 512,
                   exclude_seen: bool = False) -> MetricsReport:
    """Average HR@k and NDCG@k over all users for the valid or test targets.

    The whole item set is ranked.  With ``exclude_seen`` the items already in a
    user's context are dropped from the candidates, except the target itself.
    """
    if which not in ("valid", "test"):
        raise ValueError(f"unknown split {which!r}")
    n = split.num_users
    hr_sum = {k: 0.0 for k in KS}
    ndcg_sum = {k: 0.0 for k in KS}
    for start in range(0, n, batch_size):
        idx = range(start, min(n, start + batch_size))
        ids = np.stack([pad_left(split.context(which, i), model.max_len) for i in idx])
        targets = np.array([split.target(which, i) for i in idx])
        scores = model.score(ids)
        if exclude_seen:
            for row, i in enumerate(idx):
                seen = np.array(split.context(which, i))
                scores[row, seen[seen != targets[row]]] = -np.inf
        ranks = target_ranks(scores, targets)
        for k in KS:
            hit = ranks <= k
            hr_sum[k] += float(hit.sum())
            ndcg_sum[k] += float((hit / np.log2(ranks + 1)).sum())
    denom = max(n, 1)
    return MetricsReport({k: hr_sum[k] / denom for k in KS}, {k: ndcg_sum[k] / denom for k in KS}, n, which)


class PopRec:
    """Static popularity ranking shared by every user."""

    def __init__(self, counts: np.ndarray, max_len: int = 50):
        self.counts = np.asarray(counts, dtype=np.float64)
        self.max_len = max_len

    def score(self, ids: np.ndarray) -> np.ndarray:
        s = np.broadcast_to(self.counts, (len(ids), len(self.counts))).copy()
        s[:, 0] = -np.inf
        return s


def poprec_rank(counts: np.ndarray) -> np.ndarray:
    """Item ids ordered by training count, most popular first (ties: smaller id)."""
    s = np.asarray(counts, dtype=np.float64).copy()
    s[0] = -np.inf
    return ranking(s)
