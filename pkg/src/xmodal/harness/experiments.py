"""Synthetic retrieval experiments: the learning run, the loss-term ablation and the pooling ablation.

Every run trains on the 80 training identities of one generated world and
ranks the 40 images of the 20 held-out identities for each of their 80 texts.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from xmodal.evaltool import RankingResult
from xmodal.harness.config import Config
from xmodal.harness.data import Dataset, SyntheticSpec, generate
from xmodal.harness.train import evaluate_params, init_params, train

# the world used by every experiment: 100 identities, 8 attribute slots,
# half of them named per text, pixel noise 0.1, 3 x 16 x 16 images
WORLD = SyntheticSpec(num_identities=100, attributes=8, rho=0.5, sigma_img=0.1, height=16, width=16, gap=1)

LEARNING = {
    "model.embed_dim": 64,
    "model.hidden": 32,
    "loss.dropout_rate": 0.0,
    "optim.epochs": 100,
    "optim.decay_epochs": [1000],
}

LOSS_ABLATION = {
    "semi-hard": {"loss.terms": ["pos", "semi"]},
    "+triplet": {"loss.terms": ["pos", "semi", "triplet"]},
    "+triplet+hardest": {"loss.terms": ["pos", "semi", "triplet", "hardest"]},
}

POOLING_ABLATION = {
    "avgpool": {"model.pooling": "avg"},
    "maxpool": {"model.pooling": "max"},
    "sgmp": {"model.pooling": "sgmp"},
}


def world(seed: int = 0) -> Dataset:
    return generate(WORLD, seed)


def learning_config(overrides: Mapping[str, object] | None = None, seed: int = 0) -> Config:
    cfg = Config()
    cfg.update(LEARNING.items())
    cfg.update((overrides or {}).items())
    cfg.seed = seed
    return cfg.validate()


@dataclass
class Outcome:
    label: str
    seed: int
    test: RankingResult
    untrained: RankingResult
    seconds: float
    metrics: list[dict] = field(default_factory=list)

    @property
    def top1(self) -> float:
        return self.test.topk[1]


def run(cfg: Config, ds: Dataset, label: str = "run", out_dir=None) -> Outcome:
    held_out = ds.subset("test")
    t0 = time.perf_counter()
    res = train(cfg, ds, out_dir)
    seconds = time.perf_counter() - t0
    before = evaluate_params(cfg, init_params(cfg, len(ds.vocab)), held_out)
    return Outcome(label, cfg.seed, evaluate_params(cfg, res.params, held_out), before, seconds, res.metrics)


def ablation(
    variants: Mapping[str, Mapping[str, object]],
    seeds: Sequence[int],
    ds: Dataset,
    base: Mapping[str, object] | None = None,
    log: Callable[[Outcome], None] | None = None,
) -> dict[str, list[Outcome]]:
    """Train every variant once per seed; the dataset stays fixed, the training seed varies."""
    out: dict[str, list[Outcome]] = {}
    for label, overrides in variants.items():
        for seed in seeds:
            o = run(learning_config({**(base or {}), **overrides}, seed), ds, label)
            out.setdefault(label, []).append(o)
            if log is not None:
                log(o)
    return out


def median_top1(outcomes: Sequence[Outcome]) -> float:
    return statistics.median(o.top1 for o in outcomes)
