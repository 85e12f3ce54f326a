"""Dataset container, on-disk format and the synthetic attribute world.

On disk a dataset is a directory with

* ``manifest.jsonl``: one line per image with its identity, split, blob
  offset/length (in bytes), shape and the token index lists of its texts;
* ``images.bin``: raw little-endian float32 image tensors, back to back;
* ``vocab.txt``: one token per line, line 0 is the out-of-vocabulary token;
* ``meta.json``: the generator settings, when the data is synthetic.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from xmodal.encoders import OOV, read_vocab, write_vocab
from xmodal.errors import InputError

MANIFEST = "manifest.jsonl"
BLOB = "images.bin"
VOCAB = "vocab.txt"
META = "meta.json"

# stripe frequencies (cycles per pixel along x, y); each slot gets its own texture
_FREQS = [(0.5, 0.0), (0.0, 0.5), (0.5, 0.5), (0.25, 0.0), (0.0, 0.25), (0.25, 0.25), (0.25, -0.25), (0.0, 0.0)]


@dataclass
class Dataset:
    images: np.ndarray  # n x 3 x H x W
    image_ids: np.ndarray  # n
    texts: list[list[int]]
    text_image: np.ndarray  # text -> image row
    vocab: list[str]
    split: np.ndarray = field(default=None)  # per image, "train" or "test"

    def __post_init__(self):
        self.image_ids = np.asarray(self.image_ids)
        self.text_image = np.asarray(self.text_image, dtype=np.intp)
        if self.split is None:
            self.split = np.array(["train"] * len(self.image_ids))
        self.split = np.asarray(self.split)
        if len(self.images) != len(self.image_ids) or len(self.texts) != len(self.text_image):
            raise InputError("dataset arrays disagree in length")

    @property
    def text_ids(self) -> np.ndarray:
        return self.image_ids[self.text_image]

    def texts_by_image(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(len(self.image_ids))]
        for t, i in enumerate(self.text_image):
            out[int(i)].append(t)
        return out

    def identities(self) -> np.ndarray:
        return np.unique(self.image_ids)

    def subset(self, split: str) -> Dataset:
        keep = np.flatnonzero(self.split == split)
        remap = {int(old): new for new, old in enumerate(keep)}
        tkeep = [t for t, i in enumerate(self.text_image) if int(i) in remap]
        return Dataset(
            images=self.images[keep],
            image_ids=self.image_ids[keep],
            texts=[self.texts[t] for t in tkeep],
            text_image=np.array([remap[int(self.text_image[t])] for t in tkeep], dtype=np.intp),
            vocab=self.vocab,
            split=self.split[keep],
        )


# ---------------------------------------------------------------- synthetic world


@dataclass
class SyntheticSpec:
    num_identities: int = 100
    attributes: int = 8  # A slots per identity
    values: int = 4  # choices per slot
    synonyms: int = 2  # S words per (slot, value)
    sigma_img: float = 0.1
    rho: float = 0.5  # fraction of slots a text mentions
    images_per_id: int = 2
    texts_per_image: int = 2
    height: int = 16
    width: int = 16
    gap: int = 0  # blank pixels between grid cells
    test_fraction: float = 0.2

    def validate(self) -> SyntheticSpec:
        if self.num_identities < 2:
            raise InputError("need at least 2 identities")
        if self.attributes < 1 or self.values < 2 or self.synonyms < 1:
            raise InputError("attributes >= 1, values >= 2, synonyms >= 1 required")
        if not 0 < self.rho <= 1 or self.rho * self.attributes < 1:
            raise InputError("rho must lie in (0, 1] with rho * attributes >= 1")
        if self.sigma_img < 0:
            raise InputError("sigma_img must be >= 0")
        if self.values ** self.attributes < self.num_identities:
            raise InputError("not enough distinct attribute combinations for the identities")
        if self.images_per_id < 1 or self.texts_per_image < 1:
            raise InputError("images_per_id and texts_per_image must be >= 1")
        if not 0 <= self.test_fraction < 1:
            raise InputError("test_fraction must lie in [0, 1)")
        rows, cols = self.grid
        if self.gap < 0 or self.height // rows <= self.gap or self.width // cols <= self.gap:
            raise InputError("image too small for the attribute grid")
        return self

    @property
    def grid(self) -> tuple[int, int]:
        rows = max(1, int(math.isqrt(self.attributes)))
        return rows, math.ceil(self.attributes / rows)

    @property
    def mentions(self) -> int:
        return max(1, int(round(self.rho * self.attributes)))

    @property
    def vocab_size(self) -> int:
        return self.attributes * self.values * self.synonyms + 1

    def word(self, slot: int, value: int, syn: int) -> str:
        return f"s{slot}v{value}w{syn}"

    def token(self, slot: int, value: int, syn: int) -> int:
        return 1 + (slot * self.values + value) * self.synonyms + syn

    def vocab(self) -> list[str]:
        words = [OOV]
        for a in range(self.attributes):
            for v in range(self.values):
                for s in range(self.synonyms):
                    words.append(self.word(a, v, s))
        return words


def _textures(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    rows, cols = spec.grid
    ch, cw = spec.height // rows - spec.gap, spec.width // cols - spec.gap
    y, x = np.mgrid[0:ch, 0:cw]
    out = np.empty((spec.attributes, ch, cw))
    for a in range(spec.attributes):
        fx, fy = _FREQS[a] if a < len(_FREQS) else tuple(rng.choice([-0.5, -0.25, 0.25, 0.5], size=2))
        out[a] = 0.5 + 0.5 * np.cos(2 * np.pi * (fx * x + fy * y))
    return out


def _colors(values: int, rng: np.random.Generator) -> np.ndarray:
    if values == 4:
        c = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    else:
        c = rng.normal(size=(values, 3))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def render(spec: SyntheticSpec, attrs: np.ndarray, textures: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Noise-free image: slot ``a`` fills grid cell ``a`` with its texture in the colour of its value."""
    rows, cols = spec.grid
    sh, sw = spec.height // rows, spec.width // cols
    ch, cw = sh - spec.gap, sw - spec.gap
    img = np.zeros((3, spec.height, spec.width))
    for a, v in enumerate(attrs):
        r, c = divmod(a, cols)
        y0, x0 = r * sh + spec.gap // 2, c * sw + spec.gap // 2
        img[:, y0:y0 + ch, x0:x0 + cw] = colors[v][:, None, None] * textures[a][None]
    return img


def generate(spec: SyntheticSpec, seed: int) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    textures = _textures(spec, rng)
    colors = _colors(spec.values, rng)

    seen: set[tuple[int, ...]] = set()
    attrs = []
    while len(attrs) < spec.num_identities:
        a = tuple(int(v) for v in rng.integers(0, spec.values, size=spec.attributes))
        if a not in seen:
            seen.add(a)
            attrs.append(a)

    n_test = int(round(spec.test_fraction * spec.num_identities))
    order = rng.permutation(spec.num_identities)
    test_ids = set(int(i) for i in order[spec.num_identities - n_test:])

    images, image_ids, split, texts, text_image = [], [], [], [], []
    for pid, a in enumerate(attrs):
        clean = render(spec, np.array(a), textures, colors)
        for _ in range(spec.images_per_id):
            row = len(images)
            images.append(clean + spec.sigma_img * rng.normal(size=clean.shape))
            image_ids.append(pid)
            split.append("test" if pid in test_ids else "train")
            for _ in range(spec.texts_per_image):
                slots = rng.permutation(spec.attributes)[: spec.mentions]
                syns = rng.integers(0, spec.synonyms, size=len(slots))
                texts.append([spec.token(int(s), a[int(s)], int(w)) for s, w in zip(slots, syns)])
                text_image.append(row)
    return Dataset(
        images=np.array(images, dtype=np.float32).astype(np.float64),
        image_ids=np.array(image_ids),
        texts=texts,
        text_image=np.array(text_image),
        vocab=spec.vocab(),
        split=np.array(split),
    )


# ---------------------------------------------------------------- files


def save_dataset(ds: Dataset, out_dir: str | Path, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_image = ds.texts_by_image()
    lines = []
    offset = 0
    blobs = []
    for i in range(len(ds.image_ids)):
        raw = np.ascontiguousarray(ds.images[i], dtype="<f4").tobytes()
        lines.append(
            json.dumps(
                {
                    "id": int(ds.image_ids[i]),
                    "split": str(ds.split[i]),
                    "offset": offset,
                    "length": len(raw),
                    "shape": list(ds.images[i].shape),
                    "tokens": [list(map(int, ds.texts[t])) for t in by_image[i]],
                },
                separators=(",", ":"),
            )
        )
        blobs.append(raw)
        offset += len(raw)
    (out / BLOB).write_bytes(b"".join(blobs))
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_vocab(out / VOCAB, ds.vocab)
    if meta is not None:
        (out / META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        blob = np.memmap(root / BLOB, dtype="<f4", mode="r") if (root / BLOB).stat().st_size else np.zeros(0, "<f4")
        lines = (root / MANIFEST).read_text(encoding="utf-8").splitlines()
        vocab = read_vocab(root / VOCAB)
    except OSError as exc:
        raise InputError(f"cannot read dataset at {root}: {exc}") from exc
    images, ids, split, texts, text_image = [], [], [], [], []
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        rec = json.loads(line)
        start, count = rec["offset"] // 4, rec["length"] // 4
        shape = tuple(rec["shape"])
        if count != int(np.prod(shape)):
            raise InputError(f"{MANIFEST} line {n + 1}: length does not match shape")
        images.append(np.asarray(blob[start:start + count], dtype=np.float64).reshape(shape))
        ids.append(int(rec["id"]))
        split.append(rec.get("split", "train"))
        for toks in rec["tokens"]:
            texts.append([int(t) for t in toks])
            text_image.append(len(images) - 1)
    return Dataset(np.array(images), np.array(ids), texts, np.array(text_image), vocab, np.array(split))


def gen_data(spec: SyntheticSpec, seed: int, out_dir: str | Path) -> Path:
    """Generate and write a synthetic dataset; an unwritable path raises ``OSError``."""
    ds = generate(spec, seed)
    return save_dataset(ds, out_dir, {"seed": seed, "spec": asdict(spec)})
