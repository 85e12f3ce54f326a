import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_topk
from xmodal.errors import DimensionError, InputError
from xmodal.evaltool import evaluate, format_table, rank, similarities, to_csv, write_results


def test_single_matching_image():
    res = evaluate(np.array([[1.0, 2.0]]), [7], np.array([[0.3, 0.1]]), [7])
    assert res.topk == {1: 1.0, 5: 1.0, 10: 1.0}
    assert list(res.first_correct) == [1]


def test_exact_match_ranks_first():
    gallery = np.eye(4)
    res = evaluate(gallery, [0, 1, 2, 3], np.array([[0.0, 0.0, 5.0, 0.0]]), [2])
    assert res.ranked[0, 0] == 2 and res.first_correct[0] == 1


def test_ties_keep_lower_index_first():
    gallery = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    order = rank(similarities(gallery, np.array([[1.0, 0.0]])))
    assert list(order[0]) == [0, 1, 2]
    res = evaluate(gallery, [5, 6, 6], np.array([[1.0, 0.0]]), [6])
    assert res.first_correct[0] == 2


def test_no_match_gets_rank_past_gallery():
    res = evaluate(np.eye(3), [0, 1, 2], np.array([[1.0, 0.0, 0.0]]), [9])
    assert res.first_correct[0] == 4 and res.topk[10] == 0.0


@pytest.mark.parametrize("seed", range(30))
def test_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    D = 6
    gallery, gids = rng.normal(size=(20, D)), rng.integers(0, 8, 20)
    queries, qids = rng.normal(size=(15, D)), rng.integers(0, 8, 15)
    res = evaluate(gallery, gids, queries, qids)
    topk, firsts = oracle_topk(gallery.tolist(), gids, queries.tolist(), qids)
    assert res.topk == pytest.approx(topk, abs=0)
    assert list(res.first_correct) == firsts


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_topk_monotone(seed, G):
    rng = np.random.default_rng(seed)
    res = evaluate(rng.normal(size=(G, 4)), rng.integers(0, 5, G), rng.normal(size=(7, 4)), rng.integers(0, 5, 7))
    assert res.topk[1] <= res.topk[5] <= res.topk[10]
    assert np.all(res.first_correct >= 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_gallery_scaling_leaves_ranking(seed, lam):
    rng = np.random.default_rng(seed)
    g, q = rng.normal(size=(12, 5)), rng.normal(size=(6, 5))
    scale = np.ones((12, 1))
    scale[rng.integers(12)] = lam
    a = evaluate(g, np.arange(12), q, np.arange(6))
    b = evaluate(g * scale, np.arange(12), q, np.arange(6))
    np.testing.assert_array_equal(a.ranked, b.ranked)


def test_per_query_gate_gives_cosine_ranking():
    rng = np.random.default_rng(0)
    g, q, gates = rng.normal(size=(25, 8)), rng.normal(size=(10, 8)), rng.random((10, 8))
    plain = evaluate(g, np.arange(25), q, np.arange(10))
    for gate_mode in ("scalar", "none"):
        gated = evaluate(g, np.arange(25), q, np.arange(10), gates, "gated", gate_mode=gate_mode)
        np.testing.assert_array_equal(plain.ranked, gated.ranked)


def test_elementwise_gate_can_reorder():
    g = np.array([[1.0, 0.0], [0.6, 0.8]])
    q = np.array([[0.8, 0.6]])
    plain = evaluate(g, [0, 1], q, [0])
    gated = evaluate(g, [0, 1], q, [0], np.array([[0.1, 1.0]]), "gated", gate_mode="elementwise")
    assert list(plain.ranked[0]) == [1, 0]
    assert list(gated.ranked[0]) == [1, 0]
    gated = evaluate(g, [0, 1], q, [0], np.array([[1.0, 0.1]]), "gated", gate_mode="elementwise")
    assert list(gated.ranked[0]) == [0, 1]


def test_random_embeddings_sit_at_chance():
    M, per_id, D = 20, 2, 16
    tops = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        gids = np.repeat(np.arange(M), per_id)
        res = evaluate(rng.normal(size=(M * per_id, D)), gids, rng.normal(size=(40, D)), rng.integers(0, M, 40))
        tops.append(res.topk[1])
    # 40 queries per trial, each hitting with probability 1/M
    p = 1 / M
    se = math.sqrt(p * (1 - p) / (40 * len(tops)))
    assert abs(np.mean(tops) - p) < 3 * se


def test_input_errors():
    with pytest.raises(InputError):
        evaluate(np.zeros((0, 3)), [], np.ones((1, 3)), [0])
    with pytest.raises(InputError):
        evaluate(np.ones((2, 3)), [0, 1], np.ones((1, 4)), [0])
    with pytest.raises(InputError):
        evaluate(np.ones((2, 3)), [0], np.ones((1, 3)), [0])
    with pytest.raises(InputError):
        evaluate(np.ones((2, 3)), [0, 1], np.ones((1, 3)), [0], mode="gated")
    with pytest.raises(DimensionError):
        evaluate(np.ones((2, 3)), [0, 1], np.ones((1, 3)), [0], np.ones((1, 2)), mode="gated")
    with pytest.raises(InputError):
        evaluate(np.ones((2, 3)), [0, 1], np.ones((1, 3)), [0], mode="euclid")


def test_results_table_and_csv(tmp_path):
    res = evaluate(np.eye(3), [0, 1, 2], np.eye(3), [0, 1, 2])
    table = format_table([("sgmp", res)])
    assert table.splitlines()[0].split() == ["method", "top-1", "top-5", "top-10"]
    assert table.splitlines()[1].split() == ["sgmp", "100.00", "100.00", "100.00"]
    assert to_csv([("sgmp", res)]) == "method,top1,top5,top10\nsgmp,100.00,100.00,100.00\n"
    txt, csv_path = write_results(tmp_path / "new" / "res", [("a", res), ("b", res)])
    assert txt.read_text().count("\n") == 3 and csv_path.read_text().count("\n") == 3
