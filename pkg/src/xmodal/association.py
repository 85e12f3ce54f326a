"""Gated image/text association score and the loss terms built on it."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from xmodal import tensorlab as tl
from xmodal.encoders import TextEncoding
from xmodal.errors import DegenerateInputError, DimensionError, InputError
from xmodal.tensorlab import Tensor

CLAMP = 1e-12
NORM_EPS = 1e-12
GATE_MODES = ("elementwise", "scalar", "none")
LOSS_TERMS = ("pos", "semi", "hardest", "triplet")
DROPOUT_POLICIES = ("positive-pairs-only", "both", "none")


@dataclass(frozen=True)
class PairScore:
    raw_cosine: float
    gated_logit: float
    score: float


@dataclass
class LossBreakdown:
    l_pos: float = 0.0
    l_hardest: float = 0.0
    l_semi: float = 0.0
    l_tri_img: float = 0.0
    l_tri_txt: float = 0.0
    total: float = 0.0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {
            "l_pos": self.l_pos,
            "l_hardest": self.l_hardest,
            "l_semi": self.l_semi,
            "l_tri_img": self.l_tri_img,
            "l_tri_txt": self.l_tri_txt,
            "total": self.total,
        }


@dataclass(frozen=True)
class DropoutPolicy:
    rate: float = 0.3
    apply_to: str = "positive-pairs-only"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InputError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.apply_to not in DROPOUT_POLICIES:
            raise InputError(f"unknown dropout policy {self.apply_to!r}")

    @property
    def active(self) -> bool:
        return self.apply_to != "none" and self.rate > 0.0

    def mask(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Inverted-scaling Bernoulli(1 - rate) mask."""
        keep = rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)


# ---------------------------------------------------------------- score


def _gate_values(gate: np.ndarray, mode: str) -> np.ndarray:
    if mode == "elementwise":
        return gate
    if mode == "scalar":
        return np.full_like(gate, gate.mean(axis=-1, keepdims=True))
    if mode == "none":
        return np.ones_like(gate)
    raise InputError(f"unknown gate mode {mode!r}")


def score(
    img_feat,
    txt: TextEncoding,
    temperature: float = 5.0,
    gate_mode: str = "elementwise",
) -> PairScore:
    """Score one image feature against one text encoding.

    Both features are unit-normalized; the logit is ``temperature * sum_d
    gate_d * t_d * v_d``. A zero-norm feature raises
    :class:`DegenerateInputError`.
    """
    if temperature <= 0:
        raise InputError("temperature must be positive")
    v = np.asarray(tl.as_tensor(img_feat).data, dtype=float)
    t = np.asarray(txt.feature.data, dtype=float)
    g = np.asarray(txt.memory_gate.data, dtype=float)
    if v.shape != t.shape or t.shape != g.shape or v.ndim != 1:
        raise DimensionError(f"score: image {v.shape}, text {t.shape}, gate {g.shape}")
    nv, nt = np.linalg.norm(v), np.linalg.norm(t)
    if nv == 0 or nt == 0:
        raise DegenerateInputError("score: zero-norm feature")
    vh, th = v / nv, t / nt
    cos = float(np.dot(th, vh))
    gv = _gate_values(g, gate_mode)
    if gate_mode == "elementwise":
        logit = temperature * float(np.sum(gv * th * vh))
    else:
        logit = temperature * float(gv[0]) * cos
    return PairScore(cos, logit, float(tl._sigmoid_np(np.array([logit]))[0]))


def score_matrix(
    img_feats: np.ndarray,
    txt_feats: np.ndarray,
    gates: np.ndarray,
    temperature: float = 5.0,
    gate_mode: str = "elementwise",
    eps: float = NORM_EPS,
) -> np.ndarray:
    """All image x text scores, no graph. Shapes ``Ni x D``, ``Nt x D``, ``Nt x D``."""
    v = img_feats / (np.linalg.norm(img_feats, axis=1, keepdims=True) + eps)
    t = txt_feats / (np.linalg.norm(txt_feats, axis=1, keepdims=True) + eps)
    if gate_mode == "elementwise":
        logits = temperature * (v @ (t * gates).T)
    else:
        gv = _gate_values(gates, gate_mode)[:, 0]
        logits = temperature * (v @ t.T) * gv[None, :]
    return tl._sigmoid_np(logits)


def pair_scores(
    img_feats: Tensor,
    txt_feats: Tensor,
    gates: Tensor,
    pairs: Sequence[tuple[int, int]],
    temperature=5.0,
    gate_mode: str = "elementwise",
    eps: float = NORM_EPS,
) -> Tensor:
    """Differentiable scores for the listed ``(image, text)`` index pairs."""
    if len(pairs) == 0:
        raise InputError("no pairs to score")
    ii = np.array([p[0] for p in pairs], dtype=np.intp)
    tt = np.array([p[1] for p in pairs], dtype=np.intp)
    v = tl.rows(tl.l2_normalize(img_feats, eps), ii)
    t = tl.rows(tl.l2_normalize(txt_feats, eps), tt)
    if gate_mode == "elementwise":
        dots = tl.sum(tl.mul(tl.mul(tl.rows(gates, tt), t), v), axis=1)
    elif gate_mode == "scalar":
        gbar = tl.scale(tl.sum(gates, axis=1), 1.0 / gates.shape[1])
        dots = tl.mul(tl.sum(tl.mul(t, v), axis=1), tl.rows(tl.reshape(gbar, (-1, 1)), tt)[:, 0])
    elif gate_mode == "none":
        dots = tl.sum(tl.mul(t, v), axis=1)
    else:
        raise InputError(f"unknown gate mode {gate_mode!r}")
    return tl.sigmoid(tl.scale(dots, temperature))


# ---------------------------------------------------------------- losses


def bce_matching_loss(scores: Iterable[tuple[float, int]]) -> float:
    """Mean binary cross entropy over ``(score, label)`` pairs."""
    items = list(scores)
    if not items:
        raise InputError("bce_matching_loss needs at least one pair")
    total = 0.0
    for s, label in items:
        s = min(max(float(s), CLAMP), 1.0 - CLAMP)
        total += label * np.log(s) + (1 - label) * np.log(1.0 - s)
    return -total / len(items)


def pair_nll(scores, target: str) -> Tensor:
    """Mean negative log-likelihood of ``match`` or ``non-match`` for the scores.

    ``scores`` may be a tensor (differentiable) or a list of floats.
    """
    s = scores if isinstance(scores, Tensor) else tl.as_tensor(list(scores)) if len(scores) else None
    if s is None or s.data.size == 0:
        raise InputError("pair_nll needs at least one score")
    s = tl.clamp(s, CLAMP, 1.0 - CLAMP)
    if target == "match":
        logs = tl.log(s)
    elif target == "non-match":
        one = Tensor(np.ones(s.shape))
        logs = tl.log(tl.sub(one, s))
    else:
        raise InputError(f"target must be 'match' or 'non-match', got {target!r}")
    return tl.scale(tl.mean(logs), -1.0)


def triplet_loss(anchors: Tensor, positives: Tensor, negatives: Tensor, margin: float) -> Tensor:
    """Mean hinge ``max(margin + E(a, p) - E(a, n), 0)`` with Euclidean ``E``.

    Zero once every negative is at least ``margin`` farther than its positive.
    """
    for x in (anchors, positives, negatives):
        shape = x.shape if isinstance(x, Tensor) else np.shape(x)
        if len(shape) != 2 or 0 in shape:
            raise InputError("triplet_loss needs a non-empty B x D batch")
    anchors, positives, negatives = map(tl.as_tensor, (anchors, positives, negatives))
    if not np.isfinite(margin) or margin < 0:
        raise InputError(f"margin must be finite and >= 0, got {margin}")
    d_ap = tl.row_distance(anchors, positives)
    d_an = tl.row_distance(anchors, negatives)
    shift = Tensor(np.full(d_ap.shape, float(margin)))
    hinge = tl.relu(tl.add(tl.sub(d_ap, d_an), shift))
    return tl.mean(hinge)


@dataclass
class BatchFeatures:
    """Encoded batch: unmasked features plus optional dropout-masked copies."""

    img: Tensor
    txt: Tensor
    gate: Tensor
    img_masked: Tensor | None = None
    txt_masked: Tensor | None = None


def _triplet_term(feats: Tensor, triplets, margin: float, eps: float) -> Tensor | None:
    if not triplets:
        return None
    f = tl.l2_normalize(feats, eps)
    a, p, n = (np.array([t[k] for t in triplets], dtype=np.intp) for k in range(3))
    return triplet_loss(tl.rows(f, a), tl.rows(f, p), tl.rows(f, n), margin)


def total_loss(
    feats: BatchFeatures,
    plan,
    positives: Sequence[tuple[int, int]],
    margin: float = 0.2,
    temperature=5.0,
    dropout: DropoutPolicy = DropoutPolicy(0.0, "none"),
    gate_mode: str = "elementwise",
    terms: Sequence[str] = LOSS_TERMS,
    eps: float = NORM_EPS,
) -> LossBreakdown:
    """Sum of the positive, semi-hard, hardest and two triplet terms, unit weights.

    Positive pairs are scored on the masked features whenever a dropout policy
    is active; negative pairs and triplets use the masked features only under
    the ``both`` policy.
    """
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown:
        raise InputError(f"unknown loss terms {sorted(unknown)}")
    use_masks = dropout.active and feats.img_masked is not None and feats.txt_masked is not None
    pos_img = feats.img_masked if use_masks else feats.img
    pos_txt = feats.txt_masked if use_masks else feats.txt
    both = use_masks and dropout.apply_to == "both"
    neg_img = feats.img_masked if both else feats.img
    neg_txt = feats.txt_masked if both else feats.txt

    def scored(img, txt, pairs):
        return pair_scores(img, txt, feats.gate, pairs, temperature, gate_mode, eps)

    parts: dict[str, Tensor] = {}
    if "pos" in terms:
        parts["l_pos"] = pair_nll(scored(pos_img, pos_txt, positives), "match")
    if "hardest" in terms and plan.hardest_pairs:
        parts["l_hardest"] = pair_nll(scored(neg_img, neg_txt, plan.hardest_pairs), "non-match")
    if "semi" in terms and plan.semi_hard_pairs:
        parts["l_semi"] = pair_nll(scored(neg_img, neg_txt, plan.semi_hard_pairs), "non-match")
    if "triplet" in terms:
        ti = _triplet_term(neg_img, plan.image_triplets, margin, eps)
        tt = _triplet_term(neg_txt, plan.text_triplets, margin, eps)
        if ti is not None:
            parts["l_tri_img"] = ti
        if tt is not None:
            parts["l_tri_txt"] = tt

    out = LossBreakdown()
    total = None
    for name in ("l_pos", "l_hardest", "l_semi", "l_tri_img", "l_tri_txt"):
        if name not in parts:
            continue
        setattr(out, name, parts[name].item())
        total = parts[name] if total is None else tl.add(total, parts[name])
    if total is None:
        total = Tensor(0.0)
    out.total = total.item()
    out.tensor = total
    return out
