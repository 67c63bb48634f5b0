"""Trainable dual encoder over hashed text features.

Reference implementation of the pluggable encoder interface: hashed
word unigram+bigram counts, a learned linear projection, and unit
normalization, so query/document similarity is an exact cosine and every
gradient is closed-form. Real transformer encoders can replace this
behind the same encode() surface (e.g. by ingesting precomputed
embeddings into the index); the training math does not change.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateEmbeddingError, InvariantError
from .losses import LossConfig, score_gradients
from .rng import stable_hash, substream
from .text import tokenize

QUERY = "query"
DOCUMENT = "document"

_CHECKPOINT_MAGIC = b"RKCKPT01"


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 256
    feature_dim: int = 65536
    shared_projection: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.feature_dim < 1:
            raise InvariantError("encoder dimensions must be positive")


@dataclass
class SparseFeatures:
    """L2-normalized hashed feature counts: parallel (indices, values)."""

    indices: np.ndarray
    values: np.ndarray


def featurize(text: str, feature_dim: int = 65536) -> SparseFeatures:
    """Hash word unigrams and bigrams into a normalized sparse count vector.

    Deterministic across runs and platforms. Empty or all-punctuation
    text maps to the first basis vector by convention.
    """
    tokens = tokenize(text)
    counts: dict[int, float] = {}
    for tok in tokens:
        b = stable_hash("u:" + tok, feature_dim)
        counts[b] = counts.get(b, 0.0) + 1.0
    for t1, t2 in zip(tokens, tokens[1:]):
        b = stable_hash("b:" + t1 + " " + t2, feature_dim)
        counts[b] = counts.get(b, 0.0) + 1.0
    if not counts:
        return SparseFeatures(np.array([0], dtype=np.int64), np.array([1.0]))
    idx = np.array(sorted(counts), dtype=np.int64)
    vals = np.array([counts[i] for i in idx], dtype=np.float64)
    vals /= np.linalg.norm(vals)
    return SparseFeatures(idx, vals)


@dataclass
class EncoderParams:
    """Projection weights. With a shared projection, query_proj and
    doc_proj are the same array object."""

    config: EncoderConfig
    query_proj: np.ndarray
    doc_proj: np.ndarray

    def side(self, side: str) -> np.ndarray:
        if side == QUERY:
            return self.query_proj
        if side == DOCUMENT:
            return self.doc_proj
        raise InvariantError(f"unknown encoder side {side!r}")

    def matrices(self) -> list[np.ndarray]:
        if self.config.shared_projection:
            return [self.query_proj]
        return [self.query_proj, self.doc_proj]

    def copy(self) -> "EncoderParams":
        if self.config.shared_projection:
            shared = self.query_proj.copy()
            return EncoderParams(self.config, shared, shared)
        return EncoderParams(self.config, self.query_proj.copy(), self.doc_proj.copy())


@dataclass
class GradientBundle:
    """Accumulated d(loss)/d(projection), same shape as the params."""

    config: EncoderConfig
    query_proj: np.ndarray
    doc_proj: np.ndarray

    def matrices(self) -> list[np.ndarray]:
        if self.config.shared_projection:
            return [self.query_proj]
        return [self.query_proj, self.doc_proj]

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "GradientBundle":
        if params.config.shared_projection:
            g = np.zeros_like(params.query_proj)
            return cls(params.config, g, g)
        return cls(params.config, np.zeros_like(params.query_proj),
                   np.zeros_like(params.doc_proj))


def init_params(config: EncoderConfig = EncoderConfig(), seed: int = 0) -> EncoderParams:
    """Seeded Gaussian init, std 1/sqrt(dim)."""
    scale = 1.0 / np.sqrt(config.dim)
    if config.shared_projection:
        proj = substream(seed, "encoder-init").normal(
            0.0, scale, size=(config.feature_dim, config.dim))
        return EncoderParams(config, proj, proj)
    q = substream(seed, "encoder-init-query").normal(
        0.0, scale, size=(config.feature_dim, config.dim))
    d = substream(seed, "encoder-init-doc").normal(
        0.0, scale, size=(config.feature_dim, config.dim))
    return EncoderParams(config, q, d)


def _project(params: EncoderParams, feats: SparseFeatures, side: str) -> np.ndarray:
    return feats.values @ params.side(side)[feats.indices]


def encode(params: EncoderParams, text: str, side: str = DOCUMENT) -> np.ndarray:
    """Unit-norm embedding of text for the given side."""
    feats = featurize(text, params.config.feature_dim)
    raw = _project(params, feats, side)
    norm = np.linalg.norm(raw)
    if not np.isfinite(norm) or norm < 1e-12:
        raise DegenerateEmbeddingError(
            f"degenerate embedding for side={side} (norm={norm:.3e})")
    return raw / norm


def similarity(q: np.ndarray, d: np.ndarray) -> float:
    """Cosine of two unit-norm embeddings: their dot product."""
    return float(np.dot(q, d))


@dataclass
class BatchExample:
    """One training example: a query with labeled candidate texts."""

    query: str
    candidates: list[str]
    labels: list[float]
    positive_idx: int


def forward_backward(params: EncoderParams, batch: list[BatchExample],
                     loss_cfg: LossConfig):
    """Batch loss and analytic projection gradients.

    The loss is the sum over examples of the combined ranking loss at the
    forward cosine scores; gradients chain through the normalization and
    the sparse projection. Returns (loss, GradientBundle).
    """
    cache: dict[tuple[str, str], tuple[SparseFeatures, float, np.ndarray]] = {}

    def embed(side: str, text: str) -> np.ndarray:
        key = (side, text)
        hit = cache.get(key)
        if hit is None:
            feats = featurize(text, params.config.feature_dim)
            raw = _project(params, feats, side)
            norm = float(np.linalg.norm(raw))
            if not np.isfinite(norm) or norm < 1e-12:
                raise DegenerateEmbeddingError(
                    f"degenerate embedding for side={side} (norm={norm:.3e})")
            cache[key] = (feats, norm, raw / norm)
            hit = cache[key]
        return hit[2]

    # d(loss)/d(unit embedding), accumulated per unique (side, text).
    d_unit: dict[tuple[str, str], np.ndarray] = {}

    def bump(side: str, text: str, delta: np.ndarray):
        key = (side, text)
        if key in d_unit:
            d_unit[key] += delta
        else:
            d_unit[key] = delta.copy()

    total = 0.0
    for i, ex in enumerate(batch):
        if not ex.candidates:
            raise InvariantError(f"example {i} has no candidates")
        if not (0 <= ex.positive_idx < len(ex.candidates)) \
                or ex.labels[ex.positive_idx] != 1.0:
            raise InvariantError(f"example {i} lacks a designated full-support positive")
        u = embed(QUERY, ex.query)
        vs = [embed(DOCUMENT, c) for c in ex.candidates]
        scores = np.array([np.dot(u, v) for v in vs])
        if not np.all(np.isfinite(scores)):
            raise InvariantError(f"non-finite forward score in example {i}")
        loss, g = score_gradients(ex.labels, scores, ex.positive_idx, loss_cfg)
        if not np.isfinite(loss):
            raise InvariantError(f"non-finite loss in example {i}")
        total += loss
        bump(QUERY, ex.query, sum(gc * v for gc, v in zip(g, vs)))
        for gc, ctext in zip(g, ex.candidates):
            bump(DOCUMENT, ctext, gc * u)

    grads = GradientBundle.zeros_like(params)
    for (side, text), dy in d_unit.items():
        feats, norm, y = cache[(side, text)]
        d_raw = (dy - y * np.dot(y, dy)) / norm
        target = grads.query_proj if side == QUERY else grads.doc_proj
        target[feats.indices] += np.outer(feats.values, d_raw)
    return total, grads


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    """AdamW (decoupled weight decay) or plain SGD, per projection matrix."""

    mode: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def apply_update(params: EncoderParams, grads: GradientBundle,
                 state: OptimizerState, lr: float) -> EncoderParams:
    """One optimizer step, in place. Deterministic given state."""
    mats = params.matrices()
    gmats = grads.matrices()
    if state.mode == "sgd":
        for p, g in zip(mats, gmats):
            p -= lr * (g + state.weight_decay * p)
        return params
    if state.mode != "adamw":
        raise InvariantError(f"unknown optimizer mode {state.mode!r}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in mats]
        state.v = [np.zeros_like(p) for p in mats]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(mats, gmats, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * ((m / bias1) / (np.sqrt(v / bias2) + state.eps)
                   + state.weight_decay * p)
    return params


# ---------------------------------------------------------------------------
# Checkpoints: magic, length-prefixed JSON header, raw float64 matrices.
# Raw bytes round-trip exactly and never embed wall-clock state.


def params_to_bytes(params: EncoderParams) -> bytes:
    cfg = params.config
    header = json.dumps({
        "version": 1,
        "dim": cfg.dim,
        "feature_dim": cfg.feature_dim,
        "shared_projection": cfg.shared_projection,
        "dtype": "<f8",
    }, sort_keys=True).encode("utf-8")
    blob = [_CHECKPOINT_MAGIC, struct.pack("<Q", len(header)), header]
    for mat in params.matrices():
        blob.append(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    return b"".join(blob)


def params_from_bytes(data: bytes) -> EncoderParams:
    if data[:8] != _CHECKPOINT_MAGIC:
        raise DataError("not an encoder checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    cfg = EncoderConfig(dim=header["dim"], feature_dim=header["feature_dim"],
                        shared_projection=header["shared_projection"])
    size = cfg.feature_dim * cfg.dim * 8
    off = 16 + hlen
    mats = []
    for _ in range(1 if cfg.shared_projection else 2):
        mat = np.frombuffer(data[off : off + size], dtype="<f8").reshape(
            cfg.feature_dim, cfg.dim).copy()
        mats.append(mat)
        off += size
    if off != len(data):
        raise DataError("checkpoint has trailing or missing bytes")
    if cfg.shared_projection:
        return EncoderParams(cfg, mats[0], mats[0])
    return EncoderParams(cfg, mats[0], mats[1])


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_checkpoint(path: str | Path) -> EncoderParams:
    return params_from_bytes(Path(path).read_bytes())


def params_hash(params: EncoderParams) -> str:
    """Content hash identifying a checkpoint (hex sha256)."""
    return hashlib.sha256(params_to_bytes(params)).hexdigest()
