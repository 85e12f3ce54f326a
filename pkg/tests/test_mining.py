import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_hardest, oracle_semi, oracle_triplets, random_batch
from xmodal.errors import InputError, MiningExhaustedError
from xmodal.mining import (
    BatchSpec,
    ScoreMatrix,
    build_plan,
    mine_hardest,
    mine_semi_hard,
    mine_triplets,
    sample_batch,
)


# ---------------------------------------------------------------- triplets


def test_line_example():
    x = np.array([[0.0], [1.0], [10.0], [11.0]])
    trips = mine_triplets(x, [0, 0, 1, 1])
    assert trips[0] == (0, 1, 2)
    assert trips == [(0, 1, 2), (1, 0, 2), (2, 3, 1), (3, 2, 1)]


def test_equidistant_negatives_pick_lowest_index():
    x = np.array([[0.0], [1.0], [2.0], [-2.0]])
    assert mine_triplets(x, [0, 0, 1, 1])[0] == (0, 1, 2)
    x = np.array([[0.0], [0.0], [3.0], [-3.0], [3.0]])
    assert mine_triplets(x, [0, 0, 1, 2, 1])[0] == (0, 1, 2)


def test_farthest_mode():
    x = np.array([[0.0], [1.0], [5.0], [10.0], [11.0]])
    trips = mine_triplets(x, [0, 0, 0, 1, 1], positive_mode="farthest")
    assert trips[0] == (0, 2, 3)
    assert trips[1] == (1, 2, 3)


def test_singleton_identity_skipped_with_warning():
    warnings = []
    trips = mine_triplets(np.array([[0.0], [1.0], [5.0]]), [0, 0, 1], warnings=warnings)
    assert [t[0] for t in trips] == [0, 1]
    assert len(warnings) == 1 and "anchor 2" in warnings[0]


def test_single_identity_batch_rejected():
    with pytest.raises(InputError):
        mine_triplets(np.zeros((2, 1)), [3, 3])
    with pytest.raises(InputError):
        mine_triplets(np.zeros((2, 1)), [0, 1], positive_mode="middle")


@pytest.mark.parametrize("mode", ["closest", "farthest"])
@pytest.mark.parametrize("seed", range(20))
def test_triplets_match_exhaustive_scan(seed, mode):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 4, size=16)
    x = rng.normal(size=(16, 3))
    assert mine_triplets(x, ids, mode) == oracle_triplets(x, ids, mode)


@pytest.mark.parametrize("seed", range(10))
def test_triplets_match_scan_on_tied_integer_grid(seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 3, size=12)
    x = rng.integers(-2, 3, size=(12, 2)).astype(float)
    for mode in ("closest", "farthest"):
        assert mine_triplets(x, ids, mode) == oracle_triplets(x, ids, mode)


# ---------------------------------------------------------------- semi-hard


def test_semi_hard_two_identity_minimal_batch():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])
    txt = np.array([[0.5, 0.5], [0.2, 0.9]])
    pairs = mine_semi_hard(img, txt, [0, 1], [0, 1], [(0, 0), (1, 1)])
    assert sorted(pairs) == [(0, 1), (1, 0)]


@pytest.mark.parametrize("seed", range(20))
def test_semi_hard_matches_exhaustive_scan(seed):
    img, txt, img_ids, txt_ids, positives = random_batch(np.random.default_rng(seed))
    got = mine_semi_hard(img, txt, img_ids, txt_ids, positives)
    assert got == oracle_semi(img, txt, img_ids, txt_ids, positives)
    assert all(img_ids[i] != txt_ids[t] for i, t in got)


def test_semi_hard_needs_two_identities():
    with pytest.raises(InputError):
        mine_semi_hard(np.zeros((1, 2)), np.zeros((1, 2)), [0], [0], [(0, 0)])


# ---------------------------------------------------------------- hardest


def test_hardest_single_row():
    # image 0 against texts of identities 1, 2, 3; a second image owns text 0
    sm = ScoreMatrix([[0.2, 0.9, 0.4], [0.0, 0.0, 0.0]], [0, 1], [1, 2, 3])
    assert mine_hardest(sm, [(0, 0)])[0] == (0, 1)
    assert mine_hardest(sm, [(0, 0)], exclude={(0, 1)})[0] == (0, 2)


def test_hardest_skips_same_identity_texts():
    sm = ScoreMatrix([[0.2, 0.9, 0.4], [0.1, 0.1, 0.1]], [0, 1], [1, 0, 2])
    assert mine_hardest(sm, [(0, 1)])[0] == (0, 2)


def test_hardest_recurses_past_several_exclusions():
    sm = ScoreMatrix([[0.2, 0.9, 0.4, 0.8], [0.0, 0.0, 0.0, 0.0]], [0, 5], [1, 2, 3, 4])
    assert mine_hardest(sm, [(0, 0)], exclude={(0, 1), (0, 3)})[0] == (0, 2)


def test_hardest_ties_go_to_lowest_index():
    sm = ScoreMatrix([[0.5, 0.7, 0.7], [0.0, 0.0, 0.0]], [0, 9], [1, 2, 3])
    assert mine_hardest(sm, [(0, 0)])[0] == (0, 1)


def test_hardest_exhausted_names_anchor():
    sm = ScoreMatrix([[0.1, 0.2], [0.3, 0.4]], [0, 1], [0, 1])
    with pytest.raises(MiningExhaustedError, match="image anchor 0"):
        mine_hardest(sm, [(0, 0)], exclude={(0, 1)})
    with pytest.raises(MiningExhaustedError, match="text anchor 0"):
        mine_hardest(sm, [(0, 0)], exclude={(1, 0)})


@pytest.mark.parametrize("seed", range(20))
def test_hardest_matches_sorted_scan(seed):
    rng = np.random.default_rng(seed)
    img_ids = rng.integers(0, 4, size=8)
    txt_ids = rng.integers(0, 4, size=16)
    s = rng.random((8, 16))
    if seed % 2:
        s = np.round(s, 1)  # force ties
    positives = [(i, t) for t in range(16) for i in range(8) if img_ids[i] == txt_ids[t]][:6]
    exclude = {(int(rng.integers(8)), int(rng.integers(16))) for _ in range(12)}
    try:
        got = mine_hardest(ScoreMatrix(s, img_ids, txt_ids), positives, exclude)
    except MiningExhaustedError:
        with pytest.raises(StopIteration):
            oracle_hardest(s, img_ids, txt_ids, positives, exclude)
        return
    assert got == oracle_hardest(s, img_ids, txt_ids, positives, exclude)
    assert not set(got) & exclude


def test_score_matrix_shape_checked():
    with pytest.raises(InputError):
        ScoreMatrix(np.zeros((2, 3)), [0, 1], [0, 1])


# ---------------------------------------------------------------- plans


def _plan_for(seed, mode="closest"):
    """Random batch and plan; ``plan`` is None when mining was exhausted (checked against the oracle)."""
    rng = np.random.default_rng(seed)
    img, txt, img_ids, txt_ids, positives = random_batch(rng, P=int(rng.integers(2, 6)))
    sm = ScoreMatrix(rng.random((len(img), len(txt))), img_ids, txt_ids)
    data = (img, txt, img_ids, txt_ids, positives, sm)
    try:
        return build_plan(img, txt, img_ids, txt_ids, positives, sm, mode), data
    except MiningExhaustedError:
        semi = oracle_semi(img, txt, img_ids, txt_ids, positives)
        with pytest.raises(StopIteration):
            oracle_hardest(sm.scores, img_ids, txt_ids, positives, set(semi))
        return None, data


@pytest.mark.parametrize("seed", range(10))
def test_plan_equals_oracle_composition(seed):
    plan, (img, txt, img_ids, txt_ids, positives, sm) = _plan_for(seed)
    if plan is None:
        return
    assert plan.image_triplets == oracle_triplets(img, img_ids)
    assert plan.text_triplets == oracle_triplets(txt, txt_ids)
    semi = oracle_semi(img, txt, img_ids, txt_ids, positives)
    assert plan.semi_hard_pairs == semi
    assert plan.hardest_pairs == oracle_hardest(sm.scores, img_ids, txt_ids, positives, set(semi))


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["closest", "farthest"]))
def test_plan_invariants(seed, mode):
    plan, (img, txt, img_ids, txt_ids, positives, _) = _plan_for(seed, mode)
    if plan is None:
        return
    for i, t in plan.semi_hard_pairs + plan.hardest_pairs:
        assert img_ids[i] != txt_ids[t]
    for ids, trips in ((img_ids, plan.image_triplets), (txt_ids, plan.text_triplets)):
        for a, p, n in trips:
            assert ids[a] == ids[p] and a != p and ids[a] != ids[n]
    assert not set(plan.hardest_pairs) & set(plan.semi_hard_pairs)
    for pairs in (plan.semi_hard_pairs, plan.hardest_pairs):
        assert len(pairs) == len(set(pairs))
        assert 1 <= len(pairs) <= 2 * len(positives)


def test_plan_is_deterministic_and_serializable():
    a, _ = _plan_for(3)
    b, _ = _plan_for(3)
    assert a == b
    d = a.as_dict()
    assert set(d) == {"image_triplets", "text_triplets", "semi_hard_pairs", "hardest_pairs", "warnings"}


def test_plan_without_scores_skips_hardest():
    rng = np.random.default_rng(0)
    img, txt, img_ids, txt_ids, positives = random_batch(rng)
    plan = build_plan(img, txt, img_ids, txt_ids, positives, None)
    assert plan.hardest_pairs == [] and plan.semi_hard_pairs


# ---------------------------------------------------------------- sampling


def _toy(ids_images=((0, 2), (1, 2), (2, 2)), texts_per_image=2):
    image_ids, text_image, texts = [], [], []
    for pid, n in ids_images:
        for _ in range(n):
            image_ids.append(pid)
            for k in range(texts_per_image):
                texts.append([pid + 1, k + 1])
                text_image.append(len(image_ids) - 1)
    image_ids = np.array(image_ids)

    def texts_by_image():
        out = [[] for _ in image_ids]
        for t, i in enumerate(text_image):
            out[i].append(t)
        return out

    return SimpleNamespace(
        images=np.arange(len(image_ids), dtype=float)[:, None],
        image_ids=image_ids,
        texts=texts,
        text_image=np.array(text_image),
        texts_by_image=texts_by_image,
    )


def test_minimal_batch_shape():
    b = sample_batch(_toy(), BatchSpec(2, 1, 1), seed=0)
    assert len(b.images) == 2 and len(b.texts) == 2
    assert len(set(b.image_ids)) == 2
    assert list(b.text_ids) == [b.image_ids[i] for i in b.text_image]
    assert b.positives == [(0, 0), (1, 1)]


def test_sampler_is_deterministic():
    ds = _toy()
    a, b = sample_batch(ds, BatchSpec(3, 2, 2), 5), sample_batch(ds, BatchSpec(3, 2, 2), 5)
    np.testing.assert_array_equal(a.image_index, b.image_index)
    assert a.texts == b.texts


def test_sampler_structure_and_shortfall_warning():
    ds = _toy(((0, 1), (1, 3), (2, 2)), texts_per_image=1)
    b = sample_batch(ds, BatchSpec(3, 2, 2), 1)
    assert len(b.images) == 6 and len(b.texts) == 12
    for pid in set(b.image_ids):
        assert (b.image_ids == pid).sum() == 2
    assert any("identity 0" in w for w in b.warnings)
    assert any("texts" in w for w in b.warnings)


def test_sampler_rejects_too_few_identities():
    with pytest.raises(InputError):
        sample_batch(_toy(), BatchSpec(4, 1, 1), 0)
    with pytest.raises(InputError):
        BatchSpec(1, 1, 1)


def test_identity_frequency_is_uniform():
    ds = _toy(tuple((i, 2) for i in range(100)), texts_per_image=2)
    rng = np.random.default_rng(123)
    counts = np.zeros(100)
    n = 1000
    for _ in range(n):
        b = sample_batch(ds, BatchSpec(8, 2, 2), rng)
        counts[np.unique(b.image_ids)] += 1
    p = 8 / 100
    sigma = math.sqrt(n * p * (1 - p))
    # 100 independent 3-sigma checks: allow the one stray expected about a quarter of the time
    assert (np.abs(counts - n * p) > 3 * sigma).sum() <= 1
    chi2 = ((counts - n * p) ** 2 / (n * p * (1 - p))).sum()
    assert chi2 < 100 + 3 * math.sqrt(200)
