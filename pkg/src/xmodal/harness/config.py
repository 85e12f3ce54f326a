"""Run configuration with flat ``section.key`` names.

Config files are plain text, one ``key = value`` per line. ``#`` starts a
comment. Values are read as JSON when possible (numbers, ``true``/``false``,
lists such as ``[70, 90]``, quoted strings) and as bare strings otherwise::

    # desk-scale run
    seed = 7
    model.pooling = sgmp
    optim.decay_epochs = [70, 90]
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from xmodal.association import DROPOUT_POLICIES, GATE_MODES, LOSS_TERMS
from xmodal.encoders import POOLINGS
from xmodal.errors import ConfigError
from xmodal.mining import POSITIVE_MODES


@dataclass
class ModelConfig:
    embed_dim: int = 32
    hidden: int = 16
    word_dim: int = 32
    conv_channels: list[int] = field(default_factory=lambda: [16])
    kernel: int = 3
    temperature: float = 5.0
    learn_temperature: bool = False
    pooling: str = "sgmp"
    gate_mode: str = "elementwise"
    tie_directions: bool = False
    max_len: int = 64


@dataclass
class LossConfig:
    margin: float = 0.2
    dropout_rate: float = 0.3
    dropout_policy: str = "positive-pairs-only"
    terms: list[str] = field(default_factory=lambda: list(LOSS_TERMS))


@dataclass
class MiningConfig:
    positive_mode: str = "closest"


@dataclass
class BatchConfig:
    identities: int = 8
    images_per_id: int = 2
    texts_per_image: int = 2


@dataclass
class OptimConfig:
    lr: float = 2e-3
    decay_epochs: list[int] = field(default_factory=lambda: [70, 90])
    decay_rate: float = 0.1
    epochs: int = 100
    batches_per_epoch: int = 0  # 0: training identities // batch.identities
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class DataConfig:
    dir: str = "data"
    out: str = "runs/default"


@dataclass
class TrainConfig:
    checkpoint_every: int = 0  # 0: only the initial and final checkpoints
    eval_every: int = 1


@dataclass
class Config:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # ------------------------------------------------------------ flat access

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for g in dataclasses.fields(val):
                    out[f"{f.name}.{g.name}"] = getattr(val, g.name)
            else:
                out[f.name] = val
        return out

    def set(self, key: str, value: Any) -> None:
        section, _, name = key.partition(".")
        if not name:
            if section not in {f.name for f in dataclasses.fields(self)} or dataclasses.is_dataclass(
                getattr(self, section, None)
            ):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, section, _coerce(key, value, type(getattr(self, section))))
            return
        target = getattr(self, section, None)
        if not dataclasses.is_dataclass(target) or name not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        new = _coerce(key, value, type(current))
        if isinstance(current, list) and current:
            new = [_coerce(key, v, type(current[0])) for v in new]
        setattr(target, name, new)

    def update(self, pairs: Iterable[tuple[str, Any]]) -> Config:
        for k, v in pairs:
            self.set(k, v)
        return self

    def validate(self) -> Config:
        m, lo, o, b = self.model, self.loss, self.optim, self.batch
        checks = [
            (m.embed_dim >= 2, "model.embed_dim must be >= 2"),
            (m.hidden >= 1 and 2 * m.hidden == m.embed_dim, "model.hidden must be half of model.embed_dim"),
            (m.word_dim >= 1, "model.word_dim must be >= 1"),
            (all(c >= 1 for c in m.conv_channels), "model.conv_channels must be positive"),
            (1 <= len(m.conv_channels) + 1 <= 3, "conv stack must have 1 to 3 layers"),
            (m.kernel >= 1, "model.kernel must be >= 1"),
            (m.temperature > 0, "model.temperature must be > 0"),
            (m.pooling in POOLINGS, f"model.pooling must be one of {POOLINGS}"),
            (m.gate_mode in GATE_MODES, f"model.gate_mode must be one of {GATE_MODES}"),
            (m.max_len >= 1, "model.max_len must be >= 1"),
            (lo.margin >= 0, "loss.margin must be >= 0"),
            (0 <= lo.dropout_rate < 1, "loss.dropout_rate must lie in [0, 1)"),
            (lo.dropout_policy in DROPOUT_POLICIES, f"loss.dropout_policy must be one of {DROPOUT_POLICIES}"),
            (len(lo.terms) > 0 and set(lo.terms) <= set(LOSS_TERMS), f"loss.terms must be a non-empty subset of {LOSS_TERMS}"),
            (self.mining.positive_mode in POSITIVE_MODES, f"mining.positive_mode must be one of {POSITIVE_MODES}"),
            (b.identities >= 2, "batch.identities must be >= 2"),
            (b.images_per_id >= 1, "batch.images_per_id must be >= 1"),
            (b.texts_per_image >= 1, "batch.texts_per_image must be >= 1"),
            (o.lr > 0, "optim.lr must be > 0"),
            (all(e >= 1 for e in o.decay_epochs), "optim.decay_epochs must be >= 1"),
            (0 < o.decay_rate <= 1, "optim.decay_rate must lie in (0, 1]"),
            (o.epochs >= 1, "optim.epochs must be >= 1"),
            (o.batches_per_epoch >= 0, "optim.batches_per_epoch must be >= 0"),
            (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1, "optim betas must lie in [0, 1)"),
            (o.eps > 0, "optim.eps must be > 0"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.train.checkpoint_every >= 0, "train.checkpoint_every must be >= 0"),
            (self.train.eval_every >= 1, "train.eval_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @property
    def channels(self) -> list[int]:
        return [3] + list(self.model.conv_channels) + [self.model.embed_dim]

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.flat().items())


def _coerce(key: str, value: Any, kind: type) -> Any:
    if isinstance(value, str):
        if kind is str:
            parsed = parse_value(value)
            value = parsed if isinstance(parsed, str) else value.strip()
        else:
            value = parse_value(value)
    try:
        if kind is bool:
            if isinstance(value, str):
                value = {"true": True, "false": False}.get(value.lower(), value)
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or not float(value).is_integer():
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            return str(value)
        if kind is list:
            if isinstance(value, (str, int, float)):
                value = [value]
            return list(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"{key}: cannot use {value!r} as {kind.__name__}")


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if "," in text:
            return [parse_value(t) for t in text.split(",") if t.strip()]
        return text


def parse_text(text: str) -> list[tuple[str, Any]]:
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_override(item: str) -> tuple[str, Any]:
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not key=value")
    return key.strip(), value.strip()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> Config:
    cfg = Config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg.update(parse_text(text))
    cfg.update(parse_override(o) for o in overrides)
    return cfg.validate()
