"""Ranking metrics and the response reward model.

The reward of a generated preference summary is the knowledge-augmented
reranker's NDCG@5 on that user's held-in evaluation list when the summary is
encoded and adapted into the reranker's feature space. Rewards over a user's
N samples form a per-user ranking that downstream pair mining consumes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .dataio import SplitLeakError, require_train_side
from .knowledge import Adapter, TextEncoder

log = logging.getLogger(__name__)


class ZeroPositiveCounter:
    """Counts metric calls on lists with no positive label (scored 0 by rule)."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


zero_positive_lists = ZeroPositiveCounter()


def ndcg_at_k(labels, k: int) -> float:
    """NDCG@k of binary labels given in ranked order; 0.0 when no positives."""
    if len(labels) == 0:
        raise ValueError("ndcg_at_k: empty label list")
    if k < 1:
        raise ValueError(f"ndcg_at_k: k must be >= 1, got {k}")
    labels = list(labels)
    dcg = sum(rel / math.log2(i + 2) for i, rel in enumerate(labels[:k]))
    ideal = sorted(labels, reverse=True)
    idcg = sum(rel / math.log2(i + 2) for i, rel in enumerate(ideal[:k]))
    if idcg == 0.0:
        zero_positive_lists.count += 1
        return 0.0
    return dcg / idcg


def map_at_k(labels, k: int) -> float:
    """AP@k of binary labels in ranked order, normalized by min(#relevant, k)."""
    if len(labels) == 0:
        raise ValueError("map_at_k: empty label list")
    if k < 1:
        raise ValueError(f"map_at_k: k must be >= 1, got {k}")
    labels = list(labels)
    total_relevant = sum(1 for rel in labels if rel)
    if total_relevant == 0:
        zero_positive_lists.count += 1
        return 0.0
    hits = 0
    score = 0.0
    for i, rel in enumerate(labels[:k]):
        if rel:
            hits += 1
            score += hits / (i + 1)
    return score / min(total_relevant, k)


@dataclass
class MetricResult:
    ndcg_at_k: float
    map_at_k: float
    k: int


@dataclass
class ResponseScoreTable:
    """user_id -> [(sample_index, reward)] sorted by reward desc, index asc."""

    rows: dict[int, list[tuple[int, float]]] = field(default_factory=dict)
    skipped_users: int = 0

    def add(self, user_id: int, scores: list[tuple[int, float]]) -> None:
        self.rows[user_id] = sorted(scores, key=lambda sr: (-sr[1], sr[0]))

    def best(self, user_id: int) -> tuple[int, float]:
        return self.rows[user_id][0]

    def worst(self, user_id: int) -> tuple[int, float]:
        return self.rows[user_id][-1]


def knowledge_vector(encoder: TextEncoder, adapter: Adapter, text: str) -> np.ndarray:
    """encode -> adapt, without building a tape."""
    with kernel.no_grad():
        v = encoder.encode(text)
        return adapter.apply(v).numpy()


def score_responses(
    reranker,
    adapter: Adapter,
    encoder: TextEncoder,
    responses_by_user: dict[int, list],
    eval_lists: dict[int, object],
) -> ResponseScoreTable:
    """Reward each response by the reranker's NDCG@5 on the user's eval list.

    Users without an eval list are skipped (counted). Raises SplitLeakError if
    any supplied list is test-tagged: the reward signal must never see the
    test split.
    """
    require_train_side(eval_lists.values(), "score_responses")
    table = ResponseScoreTable()
    for user_id in sorted(responses_by_user):
        clist = eval_lists.get(user_id)
        if clist is None:
            table.skipped_users += 1
            continue
        scores = []
        for resp in responses_by_user[user_id]:
            vec = knowledge_vector(encoder, adapter, resp.text)
            scored = reranker.score(clist, knowledge=vec)
            ranked = [clist.labels[j] for j in scored.permutation]
            reward = ndcg_at_k(ranked, 5)
            resp.reward = reward
            scores.append((resp.sample_index, reward))
        table.add(user_id, scores)
    if table.skipped_users:
        log.warning("score_responses: skipped %d users without eval lists", table.skipped_users)
    return table


def write_score_table(path, table: ResponseScoreTable) -> None:
    import json

    with open(path, "w", encoding="utf-8") as f:
        for user_id in sorted(table.rows):
            for k, reward in table.rows[user_id]:
                f.write(json.dumps({"user": user_id, "k": k, "reward": reward}) + "\n")
