"""Model assembly, the training loop and checkpoint-based evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from xmodal import tensorlab as tl
from xmodal.association import BatchFeatures, DropoutPolicy, LossBreakdown, score_matrix, total_loss
from xmodal.encoders import (
    TextEncoderParams,
    VisualEncoderParams,
    apply_dropout,
    encode_image,
    encode_texts,
    init_text,
    init_visual,
)
from xmodal.errors import InputError, NonFiniteError
from xmodal.evaltool import RankingResult, evaluate
from xmodal.harness import checkpoint
from xmodal.harness.config import Config
from xmodal.harness.data import Dataset, load_dataset
from xmodal.mining import Batch, BatchSpec, MiningPlan, ScoreMatrix, build_plan, sample_batch

log = logging.getLogger(__name__)

METRICS = "metrics.jsonl"
TIMINGS = "timings.jsonl"
TEMPERATURE_KEY = "score.log_temperature"


# ---------------------------------------------------------------- model


def init_params(cfg: Config, vocab_size: int, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 0])
    m = cfg.model
    vis = init_visual(rng, cfg.channels, m.kernel, m.pooling)
    txt = init_text(rng, vocab_size, m.word_dim, m.hidden, m.max_len, m.tie_directions)
    params = {k: np.array(v.data) for k, v in {**vis.named(), **txt.named()}.items()}
    if m.learn_temperature:
        params[TEMPERATURE_KEY] = np.array(np.log(m.temperature))
    return params


def model_keys(params) -> list[str]:
    return sorted(k for k in params if k.startswith(("img.", "txt.", "score.")))


@dataclass
class Model:
    """Leaf tensors for one forward pass plus the config that shapes it."""

    cfg: Config
    leaves: dict[str, tl.Tensor]

    @classmethod
    def from_arrays(cls, cfg: Config, params, requires_grad: bool = False) -> Model:
        return cls(cfg, {k: tl.Tensor(params[k], requires_grad=requires_grad) for k in model_keys(params)})

    @property
    def visual(self) -> VisualEncoderParams:
        return VisualEncoderParams.from_named(self.leaves, self.cfg.model.pooling)

    @property
    def text(self) -> TextEncoderParams:
        return TextEncoderParams.from_named(self.leaves, self.cfg.model.max_len)

    @property
    def temperature(self):
        if TEMPERATURE_KEY in self.leaves:
            return tl.exp(self.leaves[TEMPERATURE_KEY])
        return self.cfg.model.temperature

    def temperature_value(self) -> float:
        t = self.temperature
        return t.item() if isinstance(t, tl.Tensor) else float(t)

    def encode(self, images: np.ndarray, texts, img_mask=None, txt_mask=None) -> BatchFeatures:
        img = encode_image(tl.Tensor(images), self.visual)
        enc = encode_texts(texts, self.text)
        return BatchFeatures(
            img=img,
            txt=enc.feature,
            gate=enc.memory_gate,
            img_masked=apply_dropout(img, img_mask) if img_mask is not None else None,
            txt_masked=apply_dropout(enc.feature, txt_mask) if txt_mask is not None else None,
        )


def _unit(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / (np.linalg.norm(x, axis=1, keepdims=True) + eps)


def plan_for(cfg: Config, feats: BatchFeatures, batch: Batch, temperature: float) -> MiningPlan:
    """Mine on the unmasked, unit-normalized features of the current batch."""
    img, txt, gate = feats.img.data, feats.txt.data, feats.gate.data
    scores = None
    if "hardest" in cfg.loss.terms:
        scores = ScoreMatrix(
            score_matrix(img, txt, gate, temperature, cfg.model.gate_mode), batch.image_ids, batch.text_ids
        )
    return build_plan(
        _unit(img), _unit(txt), batch.image_ids, batch.text_ids, batch.positives, scores, cfg.mining.positive_mode
    )


def dropout_policy(cfg: Config) -> DropoutPolicy:
    return DropoutPolicy(cfg.loss.dropout_rate, cfg.loss.dropout_policy)


@dataclass
class StepResult:
    batch: Batch
    plan: MiningPlan
    loss: LossBreakdown
    grads: dict[str, np.ndarray]
    masks: tuple[np.ndarray | None, np.ndarray | None]


def step_rng(cfg: Config, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1, epoch, step])


def forward_backward(cfg: Config, params, train: Dataset, rng: np.random.Generator) -> StepResult:
    spec = BatchSpec(cfg.batch.identities, cfg.batch.images_per_id, cfg.batch.texts_per_image)
    batch = sample_batch(train, spec, rng)
    model = Model.from_arrays(cfg, params, requires_grad=True)
    policy = dropout_policy(cfg)
    img_mask = txt_mask = None
    if policy.active:
        img_mask = policy.mask(rng, (len(batch.image_ids), cfg.model.embed_dim))
        txt_mask = policy.mask(rng, (len(batch.text_ids), cfg.model.embed_dim))
    feats = model.encode(batch.images, batch.texts, img_mask, txt_mask)
    _check_finite({"image features": feats.img, "text features": feats.txt, "memory gate": feats.gate})
    temperature = model.temperature
    plan = plan_for(cfg, feats, batch, model.temperature_value())
    loss = total_loss(
        feats,
        plan,
        batch.positives,
        margin=cfg.loss.margin,
        temperature=temperature,
        dropout=policy,
        gate_mode=cfg.model.gate_mode,
        terms=cfg.loss.terms,
    )
    _check_finite({f"loss {k}": v for k, v in loss.as_dict().items()})
    grads = {}
    if loss.tensor is not None and loss.tensor.requires_grad:
        loss.tensor.backward()
    for k, leaf in model.leaves.items():
        grads[k] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    _check_finite({f"gradient of {k}": g for k, g in grads.items()})
    return StepResult(batch, plan, loss, grads, (img_mask, txt_mask))


def _check_finite(named) -> None:
    for name, val in named.items():
        arr = val.data if isinstance(val, tl.Tensor) else np.asarray(val)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in {name}")


# ---------------------------------------------------------------- optimizer


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array(float(self.t))
        return out

    def load_state(self, tensors) -> None:
        self.m = {k[len("adam.m."):]: np.array(v) for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(v) for k, v in tensors.items() if k.startswith("adam.v.")}
        self.t = int(tensors["adam.t"]) if "adam.t" in tensors else 0


def learning_rate(cfg: Config, epoch: int) -> float:
    """Rate for 1-based ``epoch``: multiplied by ``decay_rate`` once per decay epoch already completed."""
    passed = sum(1 for d in cfg.optim.decay_epochs if d < epoch)
    return cfg.optim.lr * cfg.optim.decay_rate ** passed


# ---------------------------------------------------------------- evaluation


def encode_split(cfg: Config, params, ds: Dataset):
    with tl.no_grad():
        model = Model.from_arrays(cfg, params)
        img = encode_image(tl.Tensor(ds.images), model.visual).data
        enc = encode_texts(ds.texts, model.text)
    return img, enc.feature.data, enc.memory_gate.data


def evaluate_params(cfg: Config, params, ds: Dataset, mode: str = "plain-cosine") -> RankingResult:
    img, txt, gate = encode_split(cfg, params, ds)
    t = Model.from_arrays(cfg, params).temperature_value()
    return evaluate(img, ds.image_ids, txt, ds.text_ids, gate, mode=mode, temperature=t, gate_mode=cfg.model.gate_mode)


# ---------------------------------------------------------------- checkpoints


def checkpoint_tensors(params, opt: Adam, epoch: int, seed: int) -> dict[str, np.ndarray]:
    out = dict(params)
    out.update(opt.state())
    out["meta.epoch"] = np.array(float(epoch))
    out["meta.seed"] = np.array(float(seed))
    return out


def split_checkpoint(tensors) -> tuple[dict[str, np.ndarray], Adam, int]:
    params = {k: np.array(tensors[k]) for k in model_keys(tensors)}
    opt = Adam(lr=0.0)
    opt.load_state(tensors)
    return params, opt, int(tensors.get("meta.epoch", 0))


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    metrics: list[dict]
    out_dir: Path | None


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False, separators=(", ", ": "))


def train(
    cfg: Config,
    dataset: Dataset | None = None,
    out_dir: str | Path | None = None,
    on_step: Callable[[int, int, StepResult], None] | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Run ``cfg.optim.epochs`` epochs of sample, encode, mine, loss, backward, Adam.

    Writes ``metrics.jsonl`` (one deterministic line per epoch) and
    ``timings.jsonl`` (wall time) when ``out_dir`` is given, plus checkpoints
    ``ckpt_e0000.xmck`` (initial), every ``train.checkpoint_every`` epochs and
    ``final.xmck``.
    """
    cfg.validate()
    ds = dataset if dataset is not None else load_dataset(cfg.data.dir)
    train_ds = ds.subset("train")
    test_ds = ds.subset("test")
    if len(train_ds.identities()) < cfg.batch.identities:
        raise InputError(
            f"training split has {len(train_ds.identities())} identities, batch needs {cfg.batch.identities}"
        )
    o = cfg.optim
    opt = Adam(o.lr, o.beta1, o.beta2, o.eps)
    start = 0
    if resume is not None:
        params, opt, start = split_checkpoint(checkpoint.load(resume))
        opt.lr, opt.beta1, opt.beta2, opt.eps = o.lr, o.beta1, o.beta2, o.eps
    else:
        params = init_params(cfg, len(ds.vocab))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
        if start == 0:  # a resumed run appends to the existing logs
            (out / METRICS).write_text("", encoding="utf-8")
            (out / TIMINGS).write_text("", encoding="utf-8")
            checkpoint.save(out / "ckpt_e0000.xmck", checkpoint_tensors(params, opt, 0, cfg.seed))

    steps = o.batches_per_epoch or max(1, len(train_ds.identities()) // cfg.batch.identities)
    metrics = []
    for epoch in range(start + 1, o.epochs + 1):
        t0 = time.perf_counter()
        lr = learning_rate(cfg, epoch)
        sums: dict[str, float] = {}
        for s in range(steps):
            res = forward_backward(cfg, params, train_ds, step_rng(cfg, epoch, s))
            if on_step is not None:
                on_step(epoch, s, res)
            for k, v in res.loss.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            opt.step(params, res.grads, lr)
        rec = {"epoch": epoch, "lr": lr}
        rec.update({k: v / steps for k, v in sums.items()})
        if len(test_ds.image_ids) and (epoch % cfg.train.eval_every == 0 or epoch == o.epochs):
            r = evaluate_params(cfg, params, test_ds)
            rec.update({f"top{k}": v for k, v in r.topk.items()})
        metrics.append(rec)
        wall = time.perf_counter() - t0
        log.info("epoch %d lr %.2e loss %.4f top1 %s (%.1fs)", epoch, lr, rec["total"], rec.get("top1"), wall)
        if out is not None:
            with open(out / METRICS, "a", encoding="utf-8") as fh:
                fh.write(_dumps(rec) + "\n")
            with open(out / TIMINGS, "a", encoding="utf-8") as fh:
                fh.write(_dumps({"epoch": epoch, "wall_time": wall}) + "\n")
            every = cfg.train.checkpoint_every
            if every and epoch % every == 0:
                checkpoint.save(out / f"ckpt_e{epoch:04d}.xmck", checkpoint_tensors(params, opt, epoch, cfg.seed))
    if out is not None:
        checkpoint.save(out / "final.xmck", checkpoint_tensors(params, opt, o.epochs, cfg.seed))
    return TrainResult(params, metrics, out)
