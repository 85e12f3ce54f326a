"""The gradient-check suite behind ``xmodal gradcheck``.

Every differentiable primitive is checked at several random points, then the
encoders and the full training loss are checked at one point each. The loss
case uses a 4-identity batch whose mining plan is computed once at the base
point and held fixed, since the argmin/argmax selections are piecewise
constant.

Points closer than :data:`KINK_TOL` (primitives) or :data:`MODEL_KINK_TOL`
(encoders and loss) to a switch of a ReLU, a max, a clamp or a zero distance
are redrawn: a central difference straddling the switch measures a slope that
exists on neither side.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from xmodal import tensorlab as tl
from xmodal.association import BatchFeatures, DropoutPolicy, pair_nll, pair_scores, total_loss, triplet_loss
from xmodal.encoders import TextEncoderParams, VisualEncoderParams, encode_image, encode_texts, recurrent_pass
from xmodal.errors import EvaluationError, MiningExhaustedError
from xmodal.harness.config import Config
from xmodal.harness.data import SyntheticSpec, generate
from xmodal.harness.train import Model, init_params, plan_for
from xmodal.mining import BatchSpec, sample_batch
from xmodal.tensorlab import GradReport, Tensor, grad_check

H = 1e-5
TOL = 1e-4
KINK_TOL = 1e-3
MODEL_KINK_TOL = 10 * H  # whole-network cases: hundreds of units, so a looser guard
POINTS = 10
MAX_DRAWS = 200

Fn = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class Case:
    """``draw`` samples the differentiated point; ``make``, when set, samples the rest of the function."""

    name: str
    f: Fn | None
    draw: Callable[[np.random.Generator], dict[str, np.ndarray]]
    points: int = POINTS
    make: Callable[[np.random.Generator], Fn] | None = None
    kink_tol: float = KINK_TOL


@dataclass
class SuiteResult:
    reports: list[GradReport] = field(default_factory=list)
    seconds: float = 0.0
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return all(r.max_relative_error < self.tol for r in self.reports)

    @property
    def worst(self) -> float:
        return max((r.max_relative_error for r in self.reports), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for r in self.reports:
            flag = "ok  " if r.max_relative_error < self.tol else "FAIL"
            out.append(f"{flag} {r.op_name:<24} max rel err {r.max_relative_error:.2e}")
        return out


def _normal(**shapes):
    return lambda rng: {k: rng.normal(size=s) for k, s in shapes.items()}


def _positive(**shapes):
    return lambda rng: {k: rng.uniform(0.5, 2.0, size=s) for k, s in shapes.items()}


def op_cases() -> list[Case]:
    """One case per differentiable primitive; each is wrapped to a scalar by smooth ops."""
    s = tl.sigmoid

    def tot(x):
        return tl.sum(s(x))

    return [
        Case("matmul", lambda p: tot(tl.matmul(p["a"], p["b"])), _normal(a=(3, 4), b=(4, 2))),
        Case("add", lambda p: tl.sum(tl.mul(tl.add(p["a"], p["b"]), p["a"])), _normal(a=(5,), b=(5,))),
        Case("sub", lambda p: tl.sum(tl.mul(tl.sub(p["a"], p["b"]), p["b"])), _normal(a=(5,), b=(5,))),
        Case("mul", lambda p: tl.sum(tl.mul(p["a"], p["b"])), _normal(a=(2, 3), b=(2, 3))),
        Case("add_bias", lambda p: tot(tl.add_bias(p["x"], p["b"])), _normal(x=(3, 4), b=(4,))),
        Case("scale", lambda p: tot(tl.scale(p["x"], tl.exp(p["c"]))), _normal(x=(4,), c=())),
        Case("mul_rows", lambda p: tot(tl.mul_rows(p["x"], p["w"])), _normal(x=(3, 4), w=(3,))),
        Case("sigmoid", lambda p: tot(p["x"]), _normal(x=(6,))),
        Case("tanh", lambda p: tl.sum(tl.tanh(p["x"])), _normal(x=(6,))),
        Case("relu", lambda p: tot(tl.relu(p["x"])), _normal(x=(6,))),
        Case("exp", lambda p: tl.sum(tl.exp(p["x"])), _normal(x=(4,))),
        Case("log", lambda p: tl.sum(tl.log(p["x"])), _positive(x=(4,))),
        Case("clamp", lambda p: tot(tl.clamp(p["x"], -0.5, 0.5)), _normal(x=(6,))),
        Case("sum", lambda p: tot(tl.sum(p["x"], axis=1)), _normal(x=(3, 4))),
        Case("mean", lambda p: s(tl.mean(p["x"])), _normal(x=(3, 4))),
        Case("spatial_max", lambda p: tot(tl.spatial_max(p["x"])), _normal(x=(2, 3, 4))),
        Case("spatial_avg", lambda p: tot(tl.spatial_avg(p["x"])), _normal(x=(2, 3, 4))),
        Case("max_over_time", lambda p: tot(tl.max_over_time(p["h"])), _normal(h=(5, 3))),
        Case("max_over_time_batch", lambda p: tot(tl.max_over_time(p["h"], [4, 2])), _normal(h=(2, 4, 3))),
        Case("reshape", lambda p: tot(tl.mul(tl.reshape(p["x"], (3, 4)), p["y"])), _normal(x=(2, 6), y=(3, 4))),
        Case("getitem", lambda p: tot(tl.getitem(p["x"], (slice(None), 1))), _normal(x=(3, 4))),
        Case("rows", lambda p: tot(tl.rows(p["x"], [0, 2, 2, 1])), _normal(x=(3, 2))),
        Case("concat", lambda p: tot(tl.mul(tl.concat([p["a"], p["b"]], -1), p["c"])), _normal(a=(2, 2), b=(2, 3), c=(2, 5))),
        Case("stack", lambda p: tot(tl.mul(tl.stack([p["a"], p["b"]], 0), p["c"])), _normal(a=(3,), b=(3,), c=(2, 3))),
        Case("l2_normalize", lambda p: tl.sum(tl.mul(tl.l2_normalize(p["x"]), p["y"])), _normal(x=(3, 4), y=(3, 4))),
        Case("row_distance", lambda p: tl.sum(tl.row_distance(p["a"], p["b"])), _normal(a=(3, 4), b=(3, 4))),
        Case("conv2d", lambda p: tot(tl.conv2d(p["x"], p["w"], p["b"])), _normal(x=(2, 2, 5, 5), w=(3, 2, 3, 3), b=(3,))),
    ]


def association_cases() -> list[Case]:
    pairs = [(0, 1), (2, 2), (1, 0)]
    return [
        Case(
            "pair_scores",
            lambda p: tl.sum(pair_scores(p["img"], p["txt"], p["gate"], pairs, 5.0)),
            lambda rng: {"img": rng.normal(size=(3, 4)), "txt": rng.normal(size=(3, 4)), "gate": rng.random((3, 4))},
        ),
        Case(
            "pair_nll",
            lambda p: tl.add(pair_nll(tl.sigmoid(p["z"]), "match"), pair_nll(tl.sigmoid(p["z"]), "non-match")),
            _normal(z=(5,)),
        ),
        Case(
            "triplet_loss",
            lambda p: triplet_loss(p["a"], p["p"], p["n"], 0.5),
            _normal(a=(4, 3), p=(4, 3), n=(4, 3)),
        ),
    ]


# ---------------------------------------------------------------- model-level cases


def _suite_config(pooling: str = "sgmp") -> Config:
    cfg = Config()
    for k, v in {
        "model.embed_dim": 8,
        "model.hidden": 4,
        "model.word_dim": 4,
        "model.conv_channels": [3],
        "model.pooling": pooling,
        "batch.identities": 4,
        "batch.images_per_id": 2,
        "batch.texts_per_image": 1,
        "loss.dropout_rate": 0.3,
    }.items():
        cfg.set(k, v)
    return cfg.validate()


def _tiny_data(seed: int):
    spec = SyntheticSpec(num_identities=8, attributes=4, values=2, synonyms=2, rho=0.5, height=6, width=6, test_fraction=0.0)
    return generate(spec, seed)


def encoder_cases(seed: int) -> list[Case]:
    cfg = _suite_config()
    ds = _tiny_data(seed)
    params = init_params(cfg, len(ds.vocab), seed)
    vis = {k: v for k, v in params.items() if k.startswith("img.")}
    txt = {k: v for k, v in params.items() if k.startswith("txt.")}
    out = []
    for pooling in ("sgmp", "avg", "max"):
        images = lambda rng: rng.normal(size=(2, 3, 6, 6))  # noqa: E731

        def f(p, pooling=pooling):
            x = {k: v for k, v in p.items() if k != "x"}
            return tl.sum(encode_image(p["x"], VisualEncoderParams.from_named(x, pooling)))

        out.append(Case(f"visual_{pooling}", f, _with_fixed(vis, x=images), 1, kink_tol=MODEL_KINK_TOL))

    vocab = len(ds.vocab)

    def hidden(rng):
        toks = [int(t) for t in rng.integers(0, vocab, 3)]
        return lambda p: tl.sum(recurrent_pass(toks, TextEncoderParams.from_named(p))[0])

    def text(rng):
        seqs = [[int(t) for t in rng.integers(0, vocab, n)] for n in (3, 1, 2)]

        def f(p):
            enc = encode_texts(seqs, TextEncoderParams.from_named(p))
            return tl.add(tl.sum(tl.mul(enc.feature, enc.feature)), tl.sum(enc.memory_gate))

        return f

    out.append(Case("recurrent_pass", None, _with_fixed(txt), 1, hidden, MODEL_KINK_TOL))
    out.append(Case("text_encoding", None, _with_fixed(txt), 1, text, MODEL_KINK_TOL))
    return out


def _with_fixed(fixed: Mapping[str, np.ndarray], **random):
    def draw(rng):
        point = {k: np.array(v) for k, v in fixed.items()}
        point.update({k: g(rng) for k, g in random.items()})
        return point

    return draw


def total_loss_case(seed: int) -> Case:
    """The full loss on a 4-identity batch, dropout masks and plan frozen at the base point."""
    cfg = _suite_config()
    ds = _tiny_data(seed)
    params = init_params(cfg, len(ds.vocab), seed)
    policy = DropoutPolicy(cfg.loss.dropout_rate, cfg.loss.dropout_policy)

    def build(rng: np.random.Generator) -> Fn:
        for _ in range(MAX_DRAWS):
            batch = sample_batch(ds, BatchSpec(4, 2, 1), rng)
            with tl.no_grad():
                base = Model.from_arrays(cfg, params).encode(batch.images, batch.texts)
            try:
                plan = plan_for(cfg, base, batch, cfg.model.temperature)
                break
            except MiningExhaustedError:
                continue
        else:
            raise EvaluationError("total_loss: every sampled batch exhausted the hardest-negative miner")
        img_mask = policy.mask(rng, (len(batch.image_ids), cfg.model.embed_dim))
        txt_mask = policy.mask(rng, (len(batch.text_ids), cfg.model.embed_dim))

        def f(p):
            feats: BatchFeatures = Model(cfg, dict(p)).encode(batch.images, batch.texts, img_mask, txt_mask)
            return total_loss(
                feats, plan, batch.positives, cfg.loss.margin, cfg.model.temperature, policy, cfg.model.gate_mode
            ).tensor

        return f

    return Case("total_loss", None, _with_fixed(params), 1, build, MODEL_KINK_TOL)


# ---------------------------------------------------------------- runner


def _margin(f: Fn, point: Mapping[str, np.ndarray]) -> float:
    leaves = {k: Tensor(v, requires_grad=True) for k, v in point.items()}
    return tl.kink_margin(f(leaves))


def check_case(case: Case, rng: np.random.Generator) -> GradReport:
    """Worst report over ``case.points`` points drawn at least ``case.kink_tol`` from a kink."""
    worst = GradReport(case.name, 0.0)
    done = draws = 0
    while done < case.points:
        draws += 1
        if draws > MAX_DRAWS:
            raise EvaluationError(f"{case.name}: no point at least {case.kink_tol} away from a kink")
        point = case.draw(rng)
        f = case.make(rng) if case.make is not None else case.f
        if _margin(f, point) < case.kink_tol:
            continue
        rep = grad_check(f, point, h=H, op_name=case.name)
        if rep.max_relative_error >= worst.max_relative_error:
            worst = rep
        done += 1
    return worst


def all_cases(seed: int = 0) -> list[Case]:
    return op_cases() + association_cases() + encoder_cases(seed) + [total_loss_case(seed)]


def run_suite(seed: int = 0, tol: float = TOL, log: Callable[[str], None] | None = None) -> SuiteResult:
    """Check every case; points within ``KINK_TOL`` of a kink are redrawn."""
    t0 = time.perf_counter()
    result = SuiteResult(tol=tol)
    rng = np.random.default_rng([seed, 7])
    for case in all_cases(seed):
        result.reports.append(check_case(case, rng))
        if log is not None:
            log(result.lines()[-1])
    result.seconds = time.perf_counter() - t0
    return result
