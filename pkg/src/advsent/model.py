"""Shared encoder with rating, domain and language heads over hashed bag-of-words features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad

RATING_CLASSES = (1, 2, 4, 5)
DOMAIN_CLASSES = ("books", "movies", "music")
LANGUAGE_CLASSES = ("it", "ro")

HEADS = ("rating", "domain", "lang")
HEAD_SIZES = {"rating": len(RATING_CLASSES), "domain": len(DOMAIN_CLASSES), "lang": len(LANGUAGE_CLASSES)}
ENCODER_BLOCKS = ("enc_w", "enc_b")
PARAM_BLOCKS = ENCODER_BLOCKS + tuple(f"{h}_{s}" for h in HEADS for s in ("w", "b"))

SEPARATOR = "[SEP]"
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Featurizer:
    dim: int = 4096
    max_tokens: int = 128

    def tokens(self, title: str, text: str) -> list[str]:
        title_toks, text_toks = title.split(), text.split()
        toks = title_toks + [SEPARATOR] + text_toks if title_toks else text_toks
        return toks[: self.max_tokens]

    def __call__(self, title: str, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in self.tokens(title, text):
            vec[fnv1a_64(tok.encode("utf-8")) % self.dim] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def batch(self, pairs) -> np.ndarray:
        pairs = list(pairs)
        out = np.zeros((len(pairs), self.dim))
        for i, (title, text) in enumerate(pairs):
            out[i] = self(title, text)
        return out


def featurize(title: str, text: str, dim: int = 4096, max_tokens: int = 128) -> np.ndarray:
    return Featurizer(dim, max_tokens)(title, text)


@dataclass
class ModelParameters:
    """Encoder weights plus three structurally identical linear heads."""

    blocks: dict[str, np.ndarray]
    dropout: float = 0.1

    @property
    def input_dim(self) -> int:
        return self.blocks["enc_w"].shape[0]

    @property
    def hidden(self) -> int:
        return self.blocks["enc_w"].shape[1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __iter__(self) -> Iterator[str]:
        return iter(PARAM_BLOCKS)

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: v.copy() for k, v in self.blocks.items()}, self.dropout)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.blocks.values())

    def equals(self, other: "ModelParameters") -> bool:
        return self.dropout == other.dropout and all(
            self.blocks[k].shape == other.blocks[k].shape and np.array_equal(self.blocks[k], other.blocks[k])
            for k in PARAM_BLOCKS
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init(seed: int = 42, input_dim: int = 4096, hidden: int = 256, dropout: float = 0.1) -> ModelParameters:
    rng = np.random.default_rng(seed)
    blocks = {"enc_w": _glorot(rng, input_dim, hidden), "enc_b": np.zeros(hidden)}
    for head in HEADS:
        blocks[f"{head}_w"] = _glorot(rng, hidden, HEAD_SIZES[head])
        blocks[f"{head}_b"] = np.zeros(HEAD_SIZES[head])
    return ModelParameters(blocks, dropout)


@dataclass
class Graph:
    """Leaves and outputs of one forward pass."""

    leaves: dict[str, ad.Node]
    hidden: ad.Node
    head_inputs: dict[str, ad.Node]
    logits: dict[str, ad.Node] = field(default_factory=dict)


def build_graph(params: ModelParameters, features: np.ndarray, training: bool,
                rng: np.random.Generator | None = None) -> Graph:
    """Forward pass recorded for differentiation.

    Dropout masks are drawn per head in the fixed order rating, domain, lang.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.input_dim:
        raise ad.DimensionError(
            f"features of shape {features.shape} do not match encoder input width {params.input_dim}")
    leaves = {name: ad.Node(params[name], requires_grad=True) for name in PARAM_BLOCKS}
    x = ad.constant(features)
    hidden = ad.relu(ad.add_bias(ad.matmul(x, leaves["enc_w"]), leaves["enc_b"]))
    g = Graph(leaves, hidden, {})
    for head in HEADS:
        h = ad.dropout(hidden, params.dropout, rng, training)
        g.head_inputs[head] = h
        g.logits[head] = ad.add_bias(ad.matmul(h, leaves[f"{head}_w"]), leaves[f"{head}_b"])
    return g


def forward(params: ModelParameters, features: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rating (B x 4), domain (B x 3) and language (B x 2) logits."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    g = build_graph(params, features, mode == "train", rng)
    return tuple(g.logits[h].value for h in HEADS)


def predict_ratings(params: ModelParameters, features: np.ndarray, chunk: int = 1024) -> list[int]:
    out: list[int] = []
    for start in range(0, len(features), chunk):
        logits = forward(params, features[start:start + chunk])[0]
        out.extend(RATING_CLASSES[i] for i in logits.argmax(axis=1))
    return out


# Checkpoint layout:
#   line 1: b"ADVSENT-CKPT 1\n"
#   line 2: UTF-8 JSON header terminated by b"\n":
#           {"dropout": float, "meta": {...}, "blocks": [{"name", "shape", "dtype": "<f8", "offset", "nbytes"}]}
#   rest:   concatenated little-endian float64 payloads, offsets relative to the payload start.
CHECKPOINT_MAGIC = b"ADVSENT-CKPT 1\n"


def save_checkpoint(params: ModelParameters, path, meta: dict | None = None) -> None:
    entries, payload, offset = [], [], 0
    for name in PARAM_BLOCKS:
        data = np.ascontiguousarray(params[name], dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(params[name].shape), "dtype": "<f8",
                        "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    header = json.dumps({"dropout": params.dropout, "meta": meta or {}, "blocks": entries}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for data in payload:
            fh.write(data)


def load_checkpoint(path) -> tuple[ModelParameters, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an advsent checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    end = rest.index(b"\n")
    header = json.loads(rest[:end].decode("utf-8"))
    payload = rest[end + 1:]
    blocks = {}
    for entry in header["blocks"]:
        chunk = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise ValueError(f"{path}: truncated block {entry['name']}")
        blocks[entry["name"]] = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"]).astype(np.float64)
    missing = set(PARAM_BLOCKS) - set(blocks)
    if missing:
        raise ValueError(f"{path}: missing blocks {sorted(missing)}")
    return ModelParameters(blocks, header["dropout"]), header.get("meta", {})
