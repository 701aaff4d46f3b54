"""Ranking metrics against an independent brute-force oracle, plus the
response scoring path."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefrank.dataio import CandidateList, SplitLeakError
from prefrank.knowledge import Adapter, TextEncoder
from prefrank.policy import ReasoningResponse, build_vocab
from prefrank.reward import MetricResult, ResponseScoreTable, map_at_k, ndcg_at_k, score_responses
from prefrank.rerankers import RerankerConfig, create_reranker


def oracle_ndcg(labels, k):
    """Direct transcription of the defining formulas, written independently
    of the library implementation."""
    dcg = 0.0
    for i in range(min(k, len(labels))):
        dcg += labels[i] / math.log2(i + 2)
    ideal = sorted(labels, reverse=True)
    idcg = 0.0
    for i in range(min(k, len(ideal))):
        idcg += ideal[i] / math.log2(i + 2)
    return 0.0 if idcg == 0.0 else dcg / idcg


def oracle_map(labels, k):
    total_relevant = sum(labels)
    if total_relevant == 0:
        return 0.0
    hits, s = 0, 0.0
    for i in range(min(k, len(labels))):
        if labels[i]:
            hits += 1
            s += hits / (i + 1.0)
    return s / min(total_relevant, k)


class TestMetricOracle:
    def test_all_1024_binary_vectors_length_10(self):
        for bits in itertools.product((0, 1), repeat=10):
            labels = list(bits)
            assert abs(ndcg_at_k(labels, 5) - oracle_ndcg(labels, 5)) < 1e-12
            assert abs(map_at_k(labels, 5) - oracle_map(labels, 5)) < 1e-12

    def test_hand_derived_values(self):
        labels = [1, 0, 1, 0, 0]
        assert ndcg_at_k(labels, 5) == pytest.approx(0.9197207891481876, abs=1e-12)
        assert map_at_k(labels, 5) == pytest.approx(5.0 / 6.0, abs=1e-12)
        assert map_at_k([0, 1, 0, 0, 0], 5) == pytest.approx(0.5, abs=1e-12)

    def test_perfect_and_empty(self):
        assert ndcg_at_k([1, 1, 0, 0, 0], 5) == 1.0
        assert ndcg_at_k([0, 0, 0, 0, 0], 5) == 0.0
        assert map_at_k([0] * 5, 5) == 0.0

    def test_k_shorter_and_longer_than_list(self):
        labels = [0, 1, 1, 0, 1, 0, 0, 0, 1, 0]
        for k in (1, 3, 5, 10, 25):
            assert ndcg_at_k(labels, k) == pytest.approx(oracle_ndcg(labels, k), abs=1e-12)
            assert map_at_k(labels, k) == pytest.approx(oracle_map(labels, k), abs=1e-12)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            ndcg_at_k([], 5)
        with pytest.raises(ValueError):
            map_at_k([1, 0], 0)

    @given(st.lists(st.integers(min_value=0, max_value=1), min_size=1, max_size=16),
           st.integers(min_value=1, max_value=16))
    @settings(max_examples=200, deadline=None)
    def test_oracle_agreement_random(self, labels, k):
        assert ndcg_at_k(labels, k) == pytest.approx(oracle_ndcg(labels, k), abs=1e-12)
        assert map_at_k(labels, k) == pytest.approx(oracle_map(labels, k), abs=1e-12)

    @given(st.lists(st.integers(min_value=0, max_value=1), min_size=2, max_size=12))
    @settings(max_examples=100, deadline=None)
    def test_promoting_a_positive_never_hurts(self, labels):
        # swapping a positive upward past a negative is weakly metric-improving
        idx = [i for i in range(1, len(labels)) if labels[i] == 1 and labels[i - 1] == 0]
        if not idx:
            return
        i = idx[0]
        better = list(labels)
        better[i - 1], better[i] = better[i], better[i - 1]
        assert ndcg_at_k(better, 5) >= ndcg_at_k(labels, 5) - 1e-15
        assert map_at_k(better, 5) >= map_at_k(labels, 5) - 1e-15


class TestScoreTable:
    def test_rows_sorted_reward_desc_index_asc(self):
        t = ResponseScoreTable()
        t.add(4, [(0, 0.2), (1, 0.8), (2, 0.8), (3, 0.1)])
        assert t.rows[4] == [(1, 0.8), (2, 0.8), (0, 0.2), (3, 0.1)]
        assert t.best(4) == (1, 0.8)
        assert t.worst(4) == (3, 0.1)


def _scoring_setup(split="train"):
    vocab = build_vocab(["user likes comedy movies", "user likes drama movies"])
    encoder = TextEncoder.create(vocab, d_text=16, seed=0)
    adapter = Adapter.create(d_text=16, hidden=8, d_feat=4, seed=1)
    cfg = RerankerConfig(kind="setrank", list_len=6, item_embed_dim=4, hidden_dim=8,
                         n_heads=2, n_layers=1, d_feat=4, n_items=30, n_users=5)
    model = create_reranker(cfg, seed=2)
    clist = CandidateList(user_id=1, items=(3, 9, 11, 4, 20, 7),
                          labels=(1, 0, 0, 1, 0, 0), split=split)
    responses = {
        1: [ReasoningResponse(1, 0, (5, 2), "user likes comedy movies", -1.0),
            ReasoningResponse(1, 1, (6, 2), "user likes drama movies", -2.0)]
    }
    return model, adapter, encoder, responses, {1: clist}


class TestScoreResponses:
    def test_rewards_are_ndcg5_of_reranked_list(self):
        model, adapter, encoder, responses, lists = _scoring_setup()
        table = score_responses(model, adapter, encoder, responses, lists)
        assert set(table.rows) == {1}
        rewards = dict(table.rows[1])
        for resp in responses[1]:
            ranked = model.score(lists[1], knowledge=_kvec(encoder, adapter, resp.text))
            expect = ndcg_at_k(list(ranked.ranked_labels()), 5)
            assert rewards[resp.sample_index] == pytest.approx(expect, abs=1e-12)
            assert resp.reward == pytest.approx(expect, abs=1e-12)

    def test_users_without_lists_are_skipped_and_counted(self):
        model, adapter, encoder, responses, lists = _scoring_setup()
        responses[99] = [ReasoningResponse(99, 0, (5, 2), "user likes comedy movies", -1.0)]
        table = score_responses(model, adapter, encoder, responses, lists)
        assert table.skipped_users == 1 and 99 not in table.rows

    def test_test_split_list_trips_leak_guard(self):
        model, adapter, encoder, responses, lists = _scoring_setup(split="test")
        with pytest.raises(SplitLeakError):
            score_responses(model, adapter, encoder, responses, lists)


def _kvec(encoder, adapter, text):
    from prefrank.reward import knowledge_vector

    return knowledge_vector(encoder, adapter, text)
