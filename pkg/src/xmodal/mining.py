"""Identity-balanced batches and negative mining.

All argmin/argmax selections break ties toward the lowest index, which keeps
the vectorised miners index-for-index comparable with a brute-force scan.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from xmodal.errors import InputError, MiningExhaustedError

log = logging.getLogger(__name__)

Pair = tuple[int, int]
Triplet = tuple[int, int, int]
POSITIVE_MODES = ("closest", "farthest")


@dataclass(frozen=True)
class BatchSpec:
    identities: int = 8
    images_per_id: int = 2
    texts_per_image: int = 2

    def __post_init__(self):
        if self.identities < 2 or self.images_per_id < 1 or self.texts_per_image < 1:
            raise InputError(f"invalid batch spec {self}")

    @property
    def num_images(self) -> int:
        return self.identities * self.images_per_id

    @property
    def num_texts(self) -> int:
        return self.num_images * self.texts_per_image


@dataclass
class Batch:
    """One P x K x L batch. ``text_image[j]`` is the batch image that text ``j`` describes."""

    image_index: np.ndarray
    images: np.ndarray
    image_ids: np.ndarray
    texts: list[list[int]]
    text_ids: np.ndarray
    text_image: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @property
    def positives(self) -> list[Pair]:
        return [(int(i), j) for j, i in enumerate(self.text_image)]


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    image_ids: np.ndarray
    text_ids: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.image_ids = np.asarray(self.image_ids)
        self.text_ids = np.asarray(self.text_ids)
        if self.scores.shape != (len(self.image_ids), len(self.text_ids)):
            raise InputError(
                f"score matrix {self.scores.shape} does not match {len(self.image_ids)} images x {len(self.text_ids)} texts"
            )


@dataclass
class MiningPlan:
    image_triplets: list[Triplet] = field(default_factory=list)
    text_triplets: list[Triplet] = field(default_factory=list)
    semi_hard_pairs: list[Pair] = field(default_factory=list)
    hardest_pairs: list[Pair] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "image_triplets": [list(t) for t in self.image_triplets],
            "text_triplets": [list(t) for t in self.text_triplets],
            "semi_hard_pairs": [list(p) for p in self.semi_hard_pairs],
            "hardest_pairs": [list(p) for p in self.hardest_pairs],
            "warnings": list(self.warnings),
        }


# ---------------------------------------------------------------- sampling


def _pick(rng: np.random.Generator, pool: np.ndarray, k: int, what: str, warnings: list[str]) -> np.ndarray:
    if len(pool) >= k:
        return rng.choice(pool, size=k, replace=False)
    msg = f"{what}: only {len(pool)} available for {k} slots, sampling with replacement"
    warnings.append(msg)
    log.warning(msg)
    return rng.choice(pool, size=k, replace=True)


def sample_batch(dataset, spec: BatchSpec, seed) -> Batch:
    """Draw ``P`` distinct identities, ``K`` images each and ``L`` texts per image.

    ``dataset`` needs ``images``, ``image_ids``, ``texts`` and ``text_image``
    (see :class:`xmodal.harness.data.Dataset`). ``seed`` is anything accepted
    by ``numpy.random.default_rng``, including a ``Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.unique(dataset.image_ids)
    if len(ids) < spec.identities:
        raise InputError(f"dataset has {len(ids)} identities, batch needs {spec.identities}")
    warnings: list[str] = []
    texts_of = dataset.texts_by_image()
    chosen = rng.choice(ids, size=spec.identities, replace=False)

    img_idx, img_ids, texts, text_ids, text_image = [], [], [], [], []
    for pid in chosen:
        pool = np.flatnonzero(dataset.image_ids == pid)
        for im in _pick(rng, pool, spec.images_per_id, f"identity {pid} images", warnings):
            b = len(img_idx)
            img_idx.append(int(im))
            img_ids.append(int(pid))
            tpool = np.asarray(texts_of[int(im)])
            if len(tpool) == 0:
                raise InputError(f"image {im} has no texts")
            for t in _pick(rng, tpool, spec.texts_per_image, f"image {im} texts", warnings):
                texts.append(list(dataset.texts[int(t)]))
                text_ids.append(int(pid))
                text_image.append(b)
    img_idx = np.array(img_idx)
    return Batch(
        image_index=img_idx,
        images=dataset.images[img_idx],
        image_ids=np.array(img_ids),
        texts=texts,
        text_ids=np.array(text_ids),
        text_image=np.array(text_image),
        warnings=warnings,
    )


# ---------------------------------------------------------------- helpers


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _dedup(pairs: Sequence[Pair]) -> list[Pair]:
    seen: set[Pair] = set()
    out = []
    for p in pairs:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


# ---------------------------------------------------------------- single modality


def mine_triplets(
    features: np.ndarray,
    ids: Sequence[int],
    positive_mode: str = "closest",
    warnings: list[str] | None = None,
) -> list[Triplet]:
    """One ``(anchor, positive, negative)`` per anchor.

    The negative is the nearest sample of another identity. The positive is
    the nearest (``closest``) or farthest (``farthest``) other sample of the
    same identity. Anchors without a same-identity partner are skipped and a
    warning is recorded.
    """
    if positive_mode not in POSITIVE_MODES:
        raise InputError(f"positive_mode must be one of {POSITIVE_MODES}")
    x = np.asarray(features, dtype=float)
    ids = np.asarray(ids)
    d = pairwise_sq_dist(x, x)
    same = ids[:, None] == ids[None, :]
    n = len(ids)
    eye = np.eye(n, dtype=bool)
    pos_ok = same & ~eye
    neg_ok = ~same

    if positive_mode == "closest":
        p = np.argmin(np.where(pos_ok, d, np.inf), axis=1)
    else:
        p = np.argmax(np.where(pos_ok, d, -np.inf), axis=1)
    neg = np.argmin(np.where(neg_ok, d, np.inf), axis=1)

    out = []
    for a in range(n):
        if not pos_ok[a].any():
            msg = f"anchor {a} (identity {ids[a]}) has no positive; skipped"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        if not neg_ok[a].any():
            raise InputError(f"anchor {a} has no negative; batch holds a single identity")
        out.append((a, int(p[a]), int(neg[a])))
    return out


# ---------------------------------------------------------------- cross modality


def mine_semi_hard(
    img_feats: np.ndarray,
    txt_feats: np.ndarray,
    img_ids: Sequence[int],
    txt_ids: Sequence[int],
    positives: Sequence[Pair],
) -> list[Pair]:
    """Negative pairs built from each side's nearest different-identity neighbour.

    For a positive ``(i, t)``: ``i_n`` is the image nearest to ``i`` with a
    different identity and ``t_n`` the text nearest to ``t`` with a different
    identity; the pairs ``(i, t_n)`` and ``(i_n, t)`` are emitted, first
    occurrence kept.
    """
    img_ids = np.asarray(img_ids)
    txt_ids = np.asarray(txt_ids)
    if len(np.unique(np.concatenate([img_ids, txt_ids]))) < 2:
        raise InputError("semi-hard mining needs at least two identities")
    di = np.where(img_ids[:, None] != img_ids[None, :], pairwise_sq_dist(img_feats, img_feats), np.inf)
    dt = np.where(txt_ids[:, None] != txt_ids[None, :], pairwise_sq_dist(txt_feats, txt_feats), np.inf)
    near_img = np.argmin(di, axis=1)
    near_txt = np.argmin(dt, axis=1)
    out = []
    for i, t in positives:
        out.append((int(i), int(near_txt[t])))
        out.append((int(near_img[i]), int(t)))
    return _dedup(out)


def _ranked(scores: np.ndarray, ok: np.ndarray) -> np.ndarray:
    cand = np.flatnonzero(ok)
    order = np.argsort(-scores[cand], kind="stable")
    return cand[order]


def mine_hardest(
    score_matrix: ScoreMatrix,
    positives: Sequence[Pair],
    exclude: Sequence[Pair] | set[Pair] = (),
) -> list[Pair]:
    """Highest-scoring different-identity partner on each side of each positive.

    When the top candidate forms a pair in ``exclude`` the next one down is
    taken, and so on. Raises :class:`MiningExhaustedError` when every
    candidate is excluded.
    """
    s = score_matrix.scores
    img_ids, txt_ids = score_matrix.image_ids, score_matrix.text_ids
    excl = set(map(tuple, exclude))
    out = []
    for i, t in positives:
        row_ok = txt_ids != img_ids[i]
        for j in _ranked(s[i], row_ok):
            if (i, int(j)) not in excl:
                out.append((int(i), int(j)))
                break
        else:
            raise MiningExhaustedError(f"no admissible hardest text for image anchor {i}")
        col_ok = img_ids != txt_ids[t]
        for j in _ranked(s[:, t], col_ok):
            if (int(j), t) not in excl:
                out.append((int(j), int(t)))
                break
        else:
            raise MiningExhaustedError(f"no admissible hardest image for text anchor {t}")
    return _dedup(out)


def build_plan(
    img_feats: np.ndarray,
    txt_feats: np.ndarray,
    img_ids: Sequence[int],
    txt_ids: Sequence[int],
    positives: Sequence[Pair],
    scores: ScoreMatrix | None,
    positive_mode: str = "closest",
) -> MiningPlan:
    """Triplets per modality, then semi-hard pairs, then hardest pairs excluding the semi-hard set.

    With ``scores=None`` the hardest step is skipped.
    """
    plan = MiningPlan()
    plan.image_triplets = mine_triplets(img_feats, img_ids, positive_mode, plan.warnings)
    plan.text_triplets = mine_triplets(txt_feats, txt_ids, positive_mode, plan.warnings)
    plan.semi_hard_pairs = mine_semi_hard(img_feats, txt_feats, img_ids, txt_ids, positives)
    if scores is not None:
        plan.hardest_pairs = mine_hardest(scores, positives, set(plan.semi_hard_pairs))
    return plan
