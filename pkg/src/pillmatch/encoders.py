"""Text and pill-feature encoders plus the shared-space projection heads.

Token sequences run through one single-head transformer block and are
mean-pooled into a per-box embedding; pill feature vectors arrive precomputed.
Both modalities are mapped into the shared 256-dim space by separate two-layer
projection heads with a GELU in between.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import NonFiniteValue, ShapeMismatch, Tensor

__all__ = [
    "Vocabulary", "EncoderParams", "ProjectionParams",
    "tokenize", "encode_text", "encode_text_batch", "self_attention",
    "project", "ingest_pill_features", "sinusoidal_positions",
]

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_MASK_OFF = -1e9  # additive attention-mask value; exp underflows to exactly 0


class Vocabulary:
    """Token-to-id map with reserved PAD=0 and UNK=1 entries."""

    def __init__(self, token_to_id: dict[str, int]):
        if token_to_id.get(PAD_TOKEN) != PAD_ID or token_to_id.get(UNK_TOKEN) != UNK_ID:
            raise ValueError("vocabulary: PAD/UNK entries missing or misplaced")
        ids = sorted(token_to_id.values())
        if ids != list(range(len(token_to_id))):
            raise ValueError("vocabulary: ids must be dense in [0, size)")
        self.token_to_id = dict(token_to_id)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        """Build from an iterable of token strings (lowercased, deduplicated)."""
        mapping = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in sorted({t.lower() for t in tokens} - {PAD_TOKEN, UNK_TOKEN}):
            mapping[tok] = len(mapping)
        return cls(mapping)

    def save(self, path) -> None:
        """Write sorted "token<TAB>id" lines, UTF-8."""
        lines = [f"{tok}\t{idx}\n" for tok, idx in sorted(self.token_to_id.items())]
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(lines)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        mapping: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[1].isdigit():
                    raise ValueError(f"{path}:{lineno}: malformed vocabulary line {line!r}")
                mapping[parts[0]] = int(parts[1])
        return cls(mapping)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Whitespace-split and lowercase; unknown words map to UNK, empty text to [PAD]."""
    if len(vocab) == 0:
        raise ValueError("tokenize: empty vocabulary")
    words = text.lower().split()
    if not words:
        return [PAD_ID]
    return [vocab.token_to_id.get(w, UNK_ID) for w in words]


@dataclass
class EncoderParams:
    """Token table plus one transformer block (single-head attention + FFN)."""

    embedding: Tensor           # (|V|, d_tok)
    wq: Tensor                  # (d_tok, d_tok)
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ff1: Tensor                 # (d_tok, d_ff)
    ff1_bias: Tensor            # (1, d_ff)
    ff2: Tensor                 # (d_ff, d_tok)
    ff2_bias: Tensor            # (1, d_tok)
    ln1_gain: Tensor            # (1, d_tok)
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def __post_init__(self):
        d = self.embedding.shape[1]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ShapeMismatch(f"EncoderParams: {name} must be ({d}, {d})")
        d_ff = self.ff1.shape[1]
        if self.ff1.shape != (d, d_ff) or self.ff2.shape != (d_ff, d):
            raise ShapeMismatch("EncoderParams: feed-forward widths do not chain")
        for name in ("ff1_bias",):
            if getattr(self, name).shape != (1, d_ff):
                raise ShapeMismatch(f"EncoderParams: {name} must be (1, {d_ff})")
        for name in ("ff2_bias", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            if getattr(self, name).shape != (1, d):
                raise ShapeMismatch(f"EncoderParams: {name} must be (1, {d})")

    @property
    def width(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position encodings, (length, dim)."""
    key = (length, dim)
    cached = _PE_CACHE.get(key)
    if cached is not None:
        return cached
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * np.floor(idx / 2.0)) / dim)
    pe = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    _PE_CACHE[key] = pe
    return pe


def _one_hot(ids: list[int], vocab_size: int) -> np.ndarray:
    out = np.zeros((len(ids), vocab_size), dtype=np.float64)
    out[np.arange(len(ids)), ids] = 1.0
    return out


def self_attention(x: Tensor, params: EncoderParams,
                   mask: np.ndarray | None = None) -> Tensor:
    """Scaled single-head self-attention with output projection (no residual)."""
    q = nm.matmul(x, params.wq)
    k = nm.matmul(x, params.wk)
    v = nm.matmul(x, params.wv)
    scores = nm.smul(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(params.width))
    if mask is not None:
        scores = nm.add(scores, Tensor(mask))
    weights = nm.softmax_rows(scores)
    return nm.matmul(nm.matmul(weights, v), params.wo)


def _encoder_block(x: Tensor, params: EncoderParams,
                   mask: np.ndarray | None) -> Tensor:
    x = nm.layer_norm(nm.add(x, self_attention(x, params, mask)),
                      params.ln1_gain, params.ln1_bias)
    ff = nm.add(nm.matmul(x, params.ff1), params.ff1_bias)
    ff = nm.add(nm.matmul(nm.gelu(ff), params.ff2), params.ff2_bias)
    return nm.layer_norm(nm.add(x, ff), params.ln2_gain, params.ln2_bias)


def _validate_ids(tokens, vocab_size: int) -> list[int]:
    ids = [int(t) for t in tokens]
    if not ids:
        raise ValueError("encode_text: empty token sequence")
    for t in ids:
        if not 0 <= t < vocab_size:
            raise ValueError(f"encode_text: token id {t} outside [0, {vocab_size})")
    return ids


def encode_text(tokens, params: EncoderParams) -> Tensor:
    """Embed one token sequence into a (1, d_tok) row.

    Pipeline: token embeddings + sinusoidal positions, attention sublayer with
    residual and layer norm, feed-forward sublayer likewise, then mean-pool
    over positions.
    """
    ids = _validate_ids(tokens, params.vocab_size)
    x = nm.matmul(Tensor(_one_hot(ids, params.vocab_size)), params.embedding)
    x = nm.add(x, Tensor(sinusoidal_positions(len(ids), params.width)))
    return nm.mean_rows(_encoder_block(x, params, None))


def encode_text_batch(token_seqs, params: EncoderParams) -> Tensor:
    """Encode many sequences in one pass; row i holds sequence i's embedding.

    Sequences are stacked into one matrix with a block-diagonal attention mask
    so positions never attend across sequences; results match per-sequence
    encode_text exactly.
    """
    if not token_seqs:
        raise ValueError("encode_text_batch: no sequences")
    seqs = [_validate_ids(seq, params.vocab_size) for seq in token_seqs]
    lengths = [len(s) for s in seqs]
    total = sum(lengths)
    flat = [t for seq in seqs for t in seq]

    pe = np.concatenate([sinusoidal_positions(n, params.width) for n in lengths], axis=0)
    mask = np.full((total, total), _MASK_OFF, dtype=np.float64)
    pool = np.zeros((len(seqs), total), dtype=np.float64)
    offset = 0
    for i, n in enumerate(lengths):
        mask[offset:offset + n, offset:offset + n] = 0.0
        pool[i, offset:offset + n] = 1.0 / n
        offset += n

    x = nm.matmul(Tensor(_one_hot(flat, params.vocab_size)), params.embedding)
    x = nm.add(x, Tensor(pe))
    h = _encoder_block(x, params, mask)
    return nm.matmul(Tensor(pool), h)


@dataclass
class ProjectionParams:
    """Two affine layers with a GELU in between; output width is fixed at 256."""

    w1: Tensor        # (d_in, hidden)
    b1: Tensor        # (1, hidden)
    w2: Tensor        # (hidden, 256)
    b2: Tensor        # (1, 256)

    OUTPUT_DIM = 256

    def __post_init__(self):
        hidden = self.w1.shape[1]
        if self.b1.shape != (1, hidden):
            raise ShapeMismatch(f"ProjectionParams: b1 must be (1, {hidden})")
        if self.w2.shape[0] != hidden:
            raise ShapeMismatch("ProjectionParams: layer widths do not chain")
        if self.w2.shape[1] != self.OUTPUT_DIM or self.b2.shape != (1, self.OUTPUT_DIM):
            raise ShapeMismatch(
                f"ProjectionParams: output width must be {self.OUTPUT_DIM}")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]


def project(x: Tensor, params: ProjectionParams) -> Tensor:
    """Map vectors into the shared space: second_layer(gelu(first_layer(x))).

    Accepts a single (d,) vector or an (n, d) matrix of row vectors; the
    output keeps the input's rank with width 256.
    """
    single = x.data.ndim == 1
    rows = nm.reshape(x, (1, x.data.size)) if single else x
    if rows.data.ndim != 2 or rows.shape[1] != params.input_dim:
        raise ShapeMismatch(
            f"project: input {x.shape} does not match width {params.input_dim}")
    hidden = nm.gelu(nm.add(nm.matmul(rows, params.w1), params.b1))
    out = nm.add(nm.matmul(hidden, params.w2), params.b2)
    if single:
        return nm.reshape(out, (params.OUTPUT_DIM,))
    return out


def ingest_pill_features(features, expected_dim: int, record_id) -> Tensor:
    """Validate and wrap one precomputed pill feature vector (width, finiteness)."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != expected_dim:
        raise ShapeMismatch(
            f"pill record {record_id}: expected {expected_dim} features, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"pill record {record_id}: non-finite feature value")
    return Tensor(arr)
