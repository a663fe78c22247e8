"""Embedding data model, binary persistence, cosine geometry, and the
small trainable text encoder.

Two binary container formats, both little-endian:

  matrix file   magic "PRMC", u16 version=1, u32 rows, u32 dim,
                rows*dim float32 row-major. Row ids live in a sibling
                JSONL manifest (<path>.manifest.jsonl), one
                {"row","id","lang"} object per line.

  params file   magic "PRMP", u16 version=1, u32 vocab, u32 hidden,
                u32 out_dim, f64 gate_gain, f64 temp_logit, then the
                weight blocks as f64 in declaration order:
                token table, w1, b1, w2, b2.

Training math is float64 throughout; float32 appears only inside the
matrix container.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    ManifestMismatch,
    TruncatedFile,
    VersionMismatch,
)
from .records import write_atomic
from .rng import RngStream

MATRIX_MAGIC = b"PRMC"
PARAMS_MAGIC = b"PRMP"
FORMAT_VERSION = 1

# exp(temp_logit) is capped at 100, the usual contrastive-training clamp.
MAX_TEMP_LOGIT = math.log(100.0)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _U64
    return h


def hash_token(token: str, vocab_size: int) -> int:
    """Map a token to a table row: FNV-1a 64 over UTF-8 bytes, mod vocab."""
    return fnv1a_64(token.encode("utf-8")) % vocab_size


@dataclass
class ManifestEntry:
    row: int
    id: str
    lang: str


@dataclass
class EmbeddingMatrix:
    """Dense float32 rows plus a manifest mapping row index -> id."""

    dim: int
    data: np.ndarray  # (rows, dim) float32
    manifest: list[ManifestEntry]

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.dim < 1:
            raise DimensionMismatch(f"dim must be >= 1, got {self.dim}")
        if self.data.ndim != 2 or self.data.shape[1] != self.dim:
            raise DimensionMismatch(
                f"data shape {self.data.shape} does not match dim {self.dim}"
            )
        if len(self.manifest) != self.rows:
            raise ManifestMismatch(
                f"manifest has {len(self.manifest)} entries for {self.rows} rows"
            )
        ids = [e.id for e in self.manifest]
        if len(set(ids)) != len(ids):
            raise ManifestMismatch("duplicate ids in manifest")

    def row_index(self) -> dict[str, int]:
        return {e.id: e.row for e in self.manifest}


def save_matrix(path: str, matrix: EmbeddingMatrix) -> None:
    header = MATRIX_MAGIC + struct.pack("<HII", FORMAT_VERSION, matrix.rows, matrix.dim)
    payload = matrix.data.astype("<f4", copy=False).tobytes(order="C")
    write_atomic(path, header + payload)
    manifest_lines = [
        json.dumps({"row": e.row, "id": e.id, "lang": e.lang}, ensure_ascii=False)
        for e in matrix.manifest
    ]
    body = ("\n".join(manifest_lines) + "\n") if manifest_lines else ""
    write_atomic(manifest_path(path), body.encode("utf-8"))


def manifest_path(matrix_file: str) -> str:
    return matrix_file + ".manifest.jsonl"


def load_matrix(path: str) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MATRIX_MAGIC:
        raise BadMagic(f"{path}: expected magic {MATRIX_MAGIC!r}")
    if len(blob) < 14:
        raise TruncatedFile(f"{path}: header incomplete")
    version, rows, dim = struct.unpack_from("<HII", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")
    need = rows * dim * 4
    payload = blob[14:]
    if len(payload) < need:
        raise TruncatedFile(f"{path}: payload {len(payload)} bytes, header promises {need}")
    data = np.frombuffer(payload[:need], dtype="<f4").reshape(rows, dim).copy()
    entries = []
    with open(manifest_path(path), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            entries.append(ManifestEntry(row=int(d["row"]), id=str(d["id"]), lang=str(d["lang"])))
    if len(entries) != rows:
        raise ManifestMismatch(f"{path}: {len(entries)} manifest entries for {rows} rows")
    for i, e in enumerate(entries):
        if e.row != i:
            raise ManifestMismatch(f"{path}: manifest row {e.row} at position {i}")
    return EmbeddingMatrix(dim=dim, data=data, manifest=entries)


@dataclass
class EncoderParams:
    """Weights of the text encoder plus the contrastive temperature.

    Forward pass for tokens t_1..t_n (see encode_text):

        e_i     = table[hash(t_i)]
        gate_i  = 1 + gate_gain * sin((i+1) * theta)    elementwise, fixed
        pooled  = mean_i(e_i * gate_i)                  zero vector if n = 0
        out     = w2 @ tanh(w1 @ pooled + b1) + b2

    The multiplicative positional gate is what lets mean pooling notice
    token order; with gate_gain = 0 the encoder is a plain bag of words.
    gate_gain is a fixed hyperparameter, not a trained weight.
    """

    vocab_size: int
    hidden: int
    out_dim: int
    table: np.ndarray  # (vocab, hidden) f64
    w1: np.ndarray     # (hidden, hidden) f64
    b1: np.ndarray     # (hidden,) f64
    w2: np.ndarray     # (out_dim, hidden) f64
    b2: np.ndarray     # (out_dim,) f64
    gate_gain: float
    temp_logit: float

    def clamp_temp(self) -> None:
        if self.temp_logit > MAX_TEMP_LOGIT:
            self.temp_logit = MAX_TEMP_LOGIT

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            vocab_size=self.vocab_size,
            hidden=self.hidden,
            out_dim=self.out_dim,
            table=self.table.copy(),
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            gate_gain=self.gate_gain,
            temp_logit=self.temp_logit,
        )


def init_params(
    seed: int,
    vocab_size: int = 4096,
    hidden: int = 64,
    out_dim: int = 64,
    gate_gain: float = 0.5,
) -> EncoderParams:
    """Fresh encoder: uniform(-0.05, 0.05) weights in declaration order,
    zero biases, temperature at the usual contrastive init ln(1/0.07)."""
    rng = RngStream(seed)

    def uniform(shape):
        flat = np.array([rng.unit() for _ in range(int(np.prod(shape)))], dtype=np.float64)
        return (flat * 0.1 - 0.05).reshape(shape)

    return EncoderParams(
        vocab_size=vocab_size,
        hidden=hidden,
        out_dim=out_dim,
        table=uniform((vocab_size, hidden)),
        w1=uniform((hidden, hidden)),
        b1=np.zeros(hidden, dtype=np.float64),
        w2=uniform((out_dim, hidden)),
        b2=np.zeros(out_dim, dtype=np.float64),
        gate_gain=gate_gain,
        temp_logit=math.log(1.0 / 0.07),
    )


_gate_cache: dict[tuple[int, float], np.ndarray] = {}


def _gate_rows(n: int, hidden: int, gain: float) -> np.ndarray:
    """Gate matrix for positions 0..n-1; cached and grown on demand."""
    key = (hidden, gain)
    cached = _gate_cache.get(key)
    if cached is None or cached.shape[0] < n:
        size = max(n, 64)
        theta = 10000.0 ** (-np.arange(hidden, dtype=np.float64) / hidden)
        pos = np.arange(1, size + 1, dtype=np.float64)[:, None]
        cached = 1.0 + gain * np.sin(pos * theta[None, :])
        _gate_cache[key] = cached
    return cached[:n]


def token_ids(tokens: list[str], vocab_size: int) -> np.ndarray:
    return np.array([hash_token(t, vocab_size) for t in tokens], dtype=np.intp)


@dataclass
class EncodeCache:
    """Intermediates kept from a forward pass for backpropagation."""

    ids: np.ndarray
    gates: np.ndarray
    pooled: np.ndarray
    hidden_act: np.ndarray  # tanh(w1 @ pooled + b1)
    out: np.ndarray


def encode_tokens(params: EncoderParams, ids: np.ndarray) -> EncodeCache:
    n = len(ids)
    if n == 0:
        pooled = np.zeros(params.hidden, dtype=np.float64)
        gates = np.zeros((0, params.hidden), dtype=np.float64)
    else:
        gates = _gate_rows(n, params.hidden, params.gate_gain)
        pooled = (params.table[ids] * gates).mean(axis=0)
    hidden_act = np.tanh(params.w1 @ pooled + params.b1)
    out = params.w2 @ hidden_act + params.b2
    return EncodeCache(ids=ids, gates=gates, pooled=pooled, hidden_act=hidden_act, out=out)


def encode_text(params: EncoderParams, tokens: list[str]) -> np.ndarray:
    """Embed a token sequence; the empty sequence maps through a zero pool."""
    return encode_tokens(params, token_ids(tokens, params.vocab_size)).out


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; exactly 0 when either vector is (near) zero."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"cosine: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(u @ v) / (nu * nv)


def save_params(path: str, params: EncoderParams) -> None:
    header = PARAMS_MAGIC + struct.pack(
        "<HIIIdd",
        FORMAT_VERSION,
        params.vocab_size,
        params.hidden,
        params.out_dim,
        params.gate_gain,
        params.temp_logit,
    )
    blocks = b"".join(
        np.ascontiguousarray(block, dtype="<f8").tobytes(order="C")
        for block in (params.table, params.w1, params.b1, params.w2, params.b2)
    )
    write_atomic(path, header + blocks)


def load_params(path: str) -> EncoderParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PARAMS_MAGIC:
        raise BadMagic(f"{path}: expected magic {PARAMS_MAGIC!r}")
    head_fmt = "<HIIIdd"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < 4 + head_size:
        raise TruncatedFile(f"{path}: header incomplete")
    version, vocab, hidden, out_dim, gate_gain, temp_logit = struct.unpack_from(head_fmt, blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")
    shapes = [(vocab, hidden), (hidden, hidden), (hidden,), (out_dim, hidden), (out_dim,)]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    payload = blob[4 + head_size:]
    if len(payload) < need:
        raise TruncatedFile(f"{path}: payload {len(payload)} bytes, header promises {need}")
    blocks = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        blocks.append(arr)
        offset += count * 8
    return EncoderParams(
        vocab_size=vocab,
        hidden=hidden,
        out_dim=out_dim,
        table=blocks[0],
        w1=blocks[1],
        b1=blocks[2],
        w2=blocks[3],
        b2=blocks[4],
        gate_gain=gate_gain,
        temp_logit=temp_logit,
    )
