"""Text-to-image retrieval: rank the gallery per query and report top-k accuracy."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from xmodal.association import NORM_EPS, _gate_values
from xmodal.errors import DimensionError, InputError
from xmodal.tensorlab import _sigmoid_np

DEFAULT_KS = (1, 5, 10)


@dataclass
class RankingResult:
    ranked: np.ndarray  # Q x G gallery indices, best first
    first_correct: np.ndarray  # Q, 1-based; G + 1 when no gallery item matches
    topk: dict[int, float]

    def __getitem__(self, k: int) -> float:
        return self.topk[k]


def _unit(x: np.ndarray) -> np.ndarray:
    # only zero rows are guarded, so rescaled copies normalize to the same bits
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, NORM_EPS)


def similarities(
    gallery_feats: np.ndarray,
    query_feats: np.ndarray,
    query_gates: np.ndarray | None = None,
    mode: str = "plain-cosine",
    temperature: float = 5.0,
    gate_mode: str = "elementwise",
) -> np.ndarray:
    """``Q x G`` similarity matrix. ``gated`` reuses the training score."""
    g = np.asarray(gallery_feats, dtype=float)
    q = np.asarray(query_feats, dtype=float)
    if g.ndim != 2 or q.ndim != 2 or g.shape[1] != q.shape[1]:
        raise InputError(f"gallery {g.shape} and queries {q.shape} disagree")
    gh, qh = _unit(g), _unit(q)
    if mode == "plain-cosine":
        return qh @ gh.T
    if mode != "gated":
        raise InputError(f"unknown mode {mode!r}")
    if query_gates is None:
        raise InputError("gated mode needs the query memory gates")
    gates = np.asarray(query_gates, dtype=float)
    if gates.shape != q.shape:
        raise DimensionError(f"gates {gates.shape} do not match queries {q.shape}")
    if gate_mode == "elementwise":
        logits = temperature * ((qh * gates) @ gh.T)
    else:
        # a per-query scalar times the same cosine matrix keeps the order exact
        logits = (temperature * _gate_values(gates, gate_mode)[:, :1]) * (qh @ gh.T)
    return _sigmoid_np(logits)


def rank(sim: np.ndarray) -> np.ndarray:
    """Descending order per row; equal similarities keep the lower index first."""
    return np.argsort(-sim, axis=1, kind="stable")


def evaluate(
    gallery_feats,
    gallery_ids: Sequence[int],
    query_feats,
    query_ids: Sequence[int],
    query_gates=None,
    mode: str = "plain-cosine",
    ks: Sequence[int] = DEFAULT_KS,
    temperature: float = 5.0,
    gate_mode: str = "elementwise",
) -> RankingResult:
    """Rank every gallery image for each text query and score top-k hits.

    A query counts as correct at ``k`` when any of its top ``k`` images shares
    its identity.
    """
    gallery_ids = np.asarray(gallery_ids)
    query_ids = np.asarray(query_ids)
    g = np.asarray(gallery_feats, dtype=float)
    q = np.asarray(query_feats, dtype=float)
    if len(g) < 1:
        raise InputError("empty gallery")
    if len(gallery_ids) != len(g) or len(query_ids) != len(q):
        raise InputError("identity labels do not match feature counts")
    sim = similarities(g, q, query_gates, mode, temperature, gate_mode)
    order = rank(sim)
    hits = gallery_ids[order] == query_ids[:, None]
    G = len(g)
    first = np.where(hits.any(axis=1), hits.argmax(axis=1) + 1, G + 1)
    found = hits.any(axis=1)
    topk = {int(k): float(np.mean(found & (first <= k))) for k in ks}
    return RankingResult(order, first, topk)


# ---------------------------------------------------------------- results tables


def _rows(results: Sequence[tuple[str, RankingResult]], ks):
    for label, res in results:
        yield [label] + [f"{100.0 * res.topk[k]:.2f}" for k in ks]


def format_table(results: Sequence[tuple[str, RankingResult]], ks: Sequence[int] = DEFAULT_KS) -> str:
    header = ["method"] + [f"top-{k}" for k in ks]
    body = list(_rows(results, ks))
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + body]
    return "\n".join(lines) + "\n"


def to_csv(results: Sequence[tuple[str, RankingResult]], ks: Sequence[int] = DEFAULT_KS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"top{k}" for k in ks])
    w.writerows(_rows(results, ks))
    return buf.getvalue()


def write_results(path_stem: str | Path, results, ks: Sequence[int] = DEFAULT_KS) -> tuple[Path, Path]:
    stem = Path(path_stem)
    txt, csv_path = stem.with_suffix(".txt"), stem.with_suffix(".csv")
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt.write_text(format_table(results, ks), encoding="utf-8")
    csv_path.write_text(to_csv(results, ks), encoding="utf-8")
    return txt, csv_path
