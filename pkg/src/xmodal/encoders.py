"""Visual and textual encoders.

The visual side is a small valid-padding conv stack with ReLU followed by a
pooling head (S-GMP by default: spatial max gated by the sigmoid of the
spatial mean). The textual side embeds tokens, runs a bidirectional LSTM,
takes the max over time of the hidden states as the feature and the sigmoid
of the final cell states as a per-dimension memory gate.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from xmodal import tensorlab as tl
from xmodal.errors import DimensionError, InputError
from xmodal.tensorlab import Tensor

POOLINGS = ("sgmp", "avg", "max")


def sgmp(feature_map: Tensor) -> Tensor:
    """Smoothed global max pooling over the trailing ``H x W`` axes."""
    return tl.mul(tl.spatial_max(feature_map), tl.sigmoid(tl.spatial_avg(feature_map)))


def pool(feature_map: Tensor, kind: str = "sgmp") -> Tensor:
    if kind == "sgmp":
        return sgmp(feature_map)
    if kind == "avg":
        return tl.spatial_avg(feature_map)
    if kind == "max":
        return tl.spatial_max(feature_map)
    raise InputError(f"unknown pooling {kind!r}; expected one of {POOLINGS}")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- visual


@dataclass
class VisualEncoderParams:
    weights: list[Tensor]
    biases: list[Tensor]
    pooling: str = "sgmp"

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def kernel(self) -> int:
        return self.weights[0].shape[-1]

    @property
    def min_size(self) -> int:
        """Smallest spatial extent that survives the unpadded conv stack."""
        return 1 + len(self.weights) * (self.kernel - 1)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"img.conv{i}.w"] = w
            out[f"img.conv{i}.b"] = b
        return out

    @classmethod
    def from_named(cls, named, pooling: str = "sgmp") -> VisualEncoderParams:
        n = sum(1 for k in named if k.startswith("img.conv") and k.endswith(".w"))
        if n == 0:
            raise InputError("no visual encoder weights found")
        return cls(
            [tl.as_tensor(named[f"img.conv{i}.w"]) for i in range(n)],
            [tl.as_tensor(named[f"img.conv{i}.b"]) for i in range(n)],
            pooling,
        )


def init_visual(
    rng: np.random.Generator,
    channels: Sequence[int] = (3, 16, 32),
    kernel: int = 3,
    pooling: str = "sgmp",
) -> VisualEncoderParams:
    """Uniform(+-1/sqrt(fan_in)) conv weights; ``channels[-1]`` is the embedding size."""
    if len(channels) < 2:
        raise InputError("need at least one conv layer")
    if pooling not in POOLINGS:
        raise InputError(f"unknown pooling {pooling!r}")
    ws, bs = [], []
    for cin, cout in zip(channels[:-1], channels[1:]):
        fan_in = cin * kernel * kernel
        ws.append(Tensor(_uniform(rng, (cout, cin, kernel, kernel), fan_in)))
        bs.append(Tensor(_uniform(rng, (cout,), fan_in)))
    return VisualEncoderParams(ws, bs, pooling)


def conv_stack(images: Tensor, params: VisualEncoderParams) -> Tensor:
    x = images
    for w, b in zip(params.weights, params.biases):
        x = tl.relu(tl.conv2d(x, w, b))
    return x


def encode_image(img, params: VisualEncoderParams, dropout=None) -> Tensor:
    """Encode one ``3 x H x W`` image to ``D`` or a ``B x 3 x H x W`` stack to ``B x D``.

    ``dropout`` is an optional multiplicative mask of the output's shape.
    """
    x = tl.as_tensor(img)
    single = x.ndim == 3
    if single:
        x = tl.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != params.weights[0].shape[1]:
        raise DimensionError(f"expected (B x) {params.weights[0].shape[1]} x H x W image, got {tl.as_tensor(img).shape}")
    if min(x.shape[2:]) < params.min_size:
        raise DimensionError(
            f"image {x.shape[2]}x{x.shape[3]} below the minimum {params.min_size}x{params.min_size} for this conv stack"
        )
    feat = pool(conv_stack(x, params), params.pooling)
    if single:
        feat = tl.reshape(feat, (feat.shape[1],))
    return apply_dropout(feat, dropout)


def apply_dropout(feat: Tensor, mask) -> Tensor:
    if mask is None:
        return feat
    m = tl.as_tensor(mask)
    if m.shape != feat.shape:
        raise DimensionError(f"dropout mask {m.shape} does not match feature {feat.shape}")
    return tl.mul(feat, m)


# ---------------------------------------------------------------- textual


@dataclass
class LSTMParams:
    wx: Tensor  # E x 4H, gate order: input, forget, output, candidate
    wh: Tensor  # H x 4H
    b: Tensor  # 4H

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


@dataclass
class TextEncoderParams:
    embed: Tensor  # V x E, row 0 is the out-of-vocabulary token
    fwd: LSTMParams
    bwd: LSTMParams
    max_len: int = 64

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def hidden(self) -> int:
        return self.fwd.hidden

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    @property
    def tied(self) -> bool:
        return self.bwd.wx is self.fwd.wx

    def named(self) -> dict[str, Tensor]:
        out = {"txt.embed": self.embed}
        dirs = [("fwd", self.fwd)] if self.tied else [("fwd", self.fwd), ("bwd", self.bwd)]
        for tag, p in dirs:
            out[f"txt.{tag}.wx"] = p.wx
            out[f"txt.{tag}.wh"] = p.wh
            out[f"txt.{tag}.b"] = p.b
        return out

    @classmethod
    def from_named(cls, named, max_len: int = 64) -> TextEncoderParams:
        def lstm(tag):
            return LSTMParams(*(tl.as_tensor(named[f"txt.{tag}.{k}"]) for k in ("wx", "wh", "b")))

        fwd = lstm("fwd")
        bwd = lstm("bwd") if "txt.bwd.wx" in named else fwd
        return cls(tl.as_tensor(named["txt.embed"]), fwd, bwd, max_len)


def init_text(
    rng: np.random.Generator,
    vocab_size: int,
    word_dim: int,
    hidden: int,
    max_len: int = 64,
    tie_directions: bool = False,
    forget_bias: float = 1.0,
) -> TextEncoderParams:
    if vocab_size < 2:
        raise InputError("vocabulary needs at least 2 entries (index 0 is out-of-vocabulary)")

    def lstm():
        fan_in = word_dim + hidden
        b = _uniform(rng, (4 * hidden,), fan_in)
        b[hidden:2 * hidden] = forget_bias
        return LSTMParams(
            Tensor(_uniform(rng, (word_dim, 4 * hidden), fan_in)),
            Tensor(_uniform(rng, (hidden, 4 * hidden), fan_in)),
            Tensor(b),
        )

    embed = Tensor(_uniform(rng, (vocab_size, word_dim), word_dim))
    fwd = lstm()
    bwd = fwd if tie_directions else lstm()
    return TextEncoderParams(embed, fwd, bwd, max_len)


@dataclass
class TextEncoding:
    feature: Tensor  # D or B x D
    memory_gate: Tensor  # same shape, values in (0, 1)


def _check_tokens(seqs: Sequence[Sequence[int]], params: TextEncoderParams) -> None:
    for s in seqs:
        if len(s) == 0:
            raise InputError("empty token sequence")
        if len(s) > params.max_len:
            raise InputError(f"sequence of length {len(s)} exceeds max_len {params.max_len}")
        for t in s:
            if not 0 <= int(t) < params.vocab_size:
                raise InputError(f"token index {t} outside vocabulary of size {params.vocab_size}")


def _run_direction(x_proj: Tensor, lengths: np.ndarray, p: LSTMParams) -> tuple[list[Tensor], Tensor]:
    """Unroll one LSTM over ``B x T x 4H`` pre-projected inputs.

    Rows shorter than ``T`` keep their state once their length is reached, so
    the returned cell is the state after each row's last real token.
    """
    B, T, _ = x_proj.shape
    H = p.hidden
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    hs = []
    for t in range(T):
        z = tl.add_bias(tl.add(x_proj[:, t, :], tl.matmul(h, p.wh)), p.b)
        i = tl.sigmoid(z[:, 0:H])
        f = tl.sigmoid(z[:, H:2 * H])
        o = tl.sigmoid(z[:, 2 * H:3 * H])
        g = tl.tanh(z[:, 3 * H:])
        c_new = tl.add(tl.mul(f, c), tl.mul(i, g))
        h_new = tl.mul(o, tl.tanh(c_new))
        active = lengths > t
        if active.all():
            c, h = c_new, h_new
        else:
            keep = Tensor(np.repeat(active[:, None].astype(float), H, axis=1))
            hold = Tensor(1.0 - keep.data)
            c = tl.add(tl.mul(keep, c_new), tl.mul(hold, c))
            h = tl.add(tl.mul(keep, h_new), tl.mul(hold, h))
        hs.append(h_new)
    return hs, c


def recurrent_pass_batch(seqs: Sequence[Sequence[int]], params: TextEncoderParams):
    """Bidirectional LSTM over a batch of variable-length sequences.

    Returns ``(hidden, lengths, final_cells)`` with ``hidden`` of shape
    ``B x T x 2H`` (rows padded past their length) and ``final_cells`` of
    shape ``B x 2H``.
    """
    _check_tokens(seqs, params)
    B = len(seqs)
    lengths = np.array([len(s) for s in seqs])
    T = int(lengths.max())
    H = params.hidden

    fwd_idx = np.zeros((B, T), dtype=np.intp)
    bwd_idx = np.zeros((B, T), dtype=np.intp)
    for b, s in enumerate(seqs):
        n = len(s)
        fwd_idx[b, :n] = s
        bwd_idx[b, :n] = list(s)[::-1]

    def project(idx, p):
        words = tl.rows(params.embed, idx.reshape(-1))
        return tl.reshape(tl.matmul(words, p.wx), (B, T, 4 * H))

    hf, cf = _run_direction(project(fwd_idx, params.fwd), lengths, params.fwd)
    hb_rev, cb = _run_direction(project(bwd_idx, params.bwd), lengths, params.bwd)

    hf = tl.stack(hf, axis=1)
    hb_rev = tl.reshape(tl.stack(hb_rev, axis=1), (B * T, H))
    # realign the backward direction with the original token positions
    src = np.zeros((B, T), dtype=np.intp)
    for b, n in enumerate(lengths):
        src[b, :n] = b * T + (n - 1 - np.arange(n))
        src[b, n:] = b * T + np.arange(n, T)
    hb = tl.reshape(tl.rows(hb_rev, src.reshape(-1)), (B, T, H))
    return tl.concat([hf, hb], axis=-1), lengths, tl.concat([cf, cb], axis=-1)


def recurrent_pass(tokens: Sequence[int], params: TextEncoderParams) -> tuple[Tensor, Tensor]:
    """Single-sequence form: ``(hidden N x 2H, final_cells 2H)``."""
    hidden, _, cells = recurrent_pass_batch([tokens], params)
    n = len(tokens)
    return tl.reshape(hidden, hidden.shape[1:])[0:n], tl.reshape(cells, (cells.shape[1],))


def encode_texts(seqs: Sequence[Sequence[int]], params: TextEncoderParams, dropout=None) -> TextEncoding:
    hidden, lengths, cells = recurrent_pass_batch(seqs, params)
    feature = tl.max_over_time(hidden, lengths)
    return TextEncoding(apply_dropout(feature, dropout), tl.sigmoid(cells))


def encode_text(tokens: Sequence[int], params: TextEncoderParams, dropout=None) -> TextEncoding:
    hidden, cells = recurrent_pass(tokens, params)
    feature = tl.max_over_time(hidden)
    return TextEncoding(apply_dropout(feature, dropout), tl.sigmoid(cells))


# ---------------------------------------------------------------- vocabulary file

OOV = "<unk>"


def write_vocab(path: str | Path, tokens: Sequence[str]) -> None:
    """One token per line; line number is the index and line 0 is the OOV token."""
    words = list(tokens)
    if not words or words[0] != OOV:
        words = [OOV] + [w for w in words if w != OOV]
    Path(path).write_text("\n".join(words) + "\n", encoding="utf-8")


def read_vocab(path: str | Path) -> list[str]:
    words = Path(path).read_text(encoding="utf-8").splitlines()
    if len(words) < 2:
        raise InputError(f"vocabulary {path} needs at least 2 lines")
    return words


def tokenize(text: str, vocab: Sequence[str]) -> list[int]:
    index = {w: i for i, w in enumerate(vocab)}
    return [index.get(w, 0) for w in text.split()]
