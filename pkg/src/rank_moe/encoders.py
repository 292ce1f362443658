"""Input encoding: ID vocabularies and tables, text embedding seams, the gated
cross layer over JD/resume embeddings, and attention over interaction history.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENTITY_KINDS = ("recruiter", "query", "talent", "role", "job")
ROLES = ("SA", "SG", "TL")
UNKNOWN = 0


def init_matrix(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) with fan_in = rows."""
    bound = np.sqrt(1.0 / rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def zeros_param(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True)


class Vocabulary:
    """External string id -> dense index. Index 0 is reserved for unknown ids.

    With a ``capacity`` the vocabulary stops growing once full, so table
    shapes depend on configuration only; overflow ids are treated as unknown.
    """

    def __init__(self, kind: str, capacity: int | None = None):
        if kind not in ENTITY_KINDS:
            raise ValueError(f"unknown entity kind {kind!r}")
        self.kind = kind
        self.capacity = capacity
        self.index: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.index) + 1

    def add(self, key: str) -> int:
        idx = self.index.get(key)
        if idx is not None:
            return idx
        if self.capacity is not None and len(self) >= self.capacity:
            return UNKNOWN
        idx = len(self.index) + 1
        self.index[key] = idx
        return idx

    def lookup(self, key: str) -> int:
        return self.index.get(key, UNKNOWN)

    def lookup_many(self, keys: Sequence[str]) -> np.ndarray:
        get = self.index.get
        return np.fromiter((get(k, UNKNOWN) for k in keys), dtype=np.int64, count=len(keys))

    def to_dict(self) -> dict:
        ordered = sorted(self.index.items(), key=lambda kv: kv[1])
        return {"kind": self.kind, "capacity": self.capacity, "ids": [k for k, _ in ordered]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        vocab = cls(d["kind"], d.get("capacity"))
        for key in d["ids"]:
            vocab.add(key)
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def role_vocabulary() -> Vocabulary:
    vocab = Vocabulary("role", capacity=len(ROLES) + 1)
    for r in ROLES:
        vocab.add(r)
    return vocab


class EmbeddingTable:
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.weights = init_matrix(rng, vocab_size, dim)

    @property
    def vocab_size(self) -> int:
        return self.weights.rows

    @property
    def dim(self) -> int:
        return self.weights.cols

    def lookup(self, index) -> Tensor:
        return lookup_embedding(self, index)


def lookup_embedding(table: EmbeddingTable, index) -> Tensor:
    return ad.gather_rows(table.weights, np.atleast_1d(index))


# ------------------------------------------------------------ text seams


class TextEmbedder(Protocol):
    dim: int

    def embed(self, text: str, key: str | None = None) -> np.ndarray: ...


@lru_cache(maxsize=1 << 16)
def _token_slot(token: str, dim: int) -> tuple[int, float]:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(h, "little")
    return value % dim, (1.0 if (value >> 63) & 1 == 0 else -1.0)


class HashingTextEmbedder:
    """Signed feature hashing of whitespace tokens, L2-normalised.

    Pure and seedless: the same text gives the same vector in any process.
    Empty text maps to the zero vector.
    """

    def __init__(self, dim: int = 1024):
        self.dim = dim

    def embed(self, text: str, key: str | None = None) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in text.split():
            slot, sign = _token_slot(tok, self.dim)
            vec[slot] += sign
        norm = np.sqrt(vec @ vec)
        if norm > 0:
            vec /= norm
        return vec.astype(np.float32)


def embed_text_stub(text: str, dim: int = 1024) -> Tensor:
    return Tensor(HashingTextEmbedder(dim).embed(text))


class FileTextEmbedder:
    """Precomputed vectors keyed by document id.

    File format: ``doc_id<TAB>f1 f2 ... f_dim`` per line.
    """

    def __init__(self, path: str | Path, dim: int = 1024):
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                doc_id, _, payload = line.partition("\t")
                vec = np.array(payload.split(), dtype=np.float64)
                if vec.size != dim:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
                norm = np.linalg.norm(vec)
                self.vectors[doc_id] = (vec / norm if norm > 0 else vec).astype(np.float32)

    def embed(self, text: str, key: str | None = None) -> np.ndarray:
        if key is None or key not in self.vectors:
            raise KeyError(f"no precomputed embedding for document {key!r}")
        return self.vectors[key]


class SummaryProvider(Protocol):
    def summarize(self, job_id: str, jd_text: str, history_texts: Sequence[str]) -> str: ...


def _field_tokens(text: str) -> list[str]:
    return [t for t in text.split() if ":" in t]


class TemplateSummaryProvider:
    """Deterministic stand-in for the offline LLM preference summary.

    Keeps the structured ``field:value`` tokens of the JD and adds fields shared
    by at least two of the ``top_k`` most recent historical matches. With no JD
    text the profile is synthesised from the history fields alone.
    """

    def __init__(self, top_k: int = 5):
        self.top_k = top_k

    def summarize(self, job_id: str, jd_text: str, history_texts: Sequence[str]) -> str:
        recent = list(history_texts[: self.top_k])
        counts: dict[str, int] = {}
        for text in recent:
            for tok in dict.fromkeys(_field_tokens(text)):
                counts[tok] = counts.get(tok, 0) + 1
        if not jd_text.strip():
            return " ".join(sorted(counts))
        shared = sorted(tok for tok, c in counts.items() if c >= 2)
        return " ".join(_field_tokens(jd_text) + shared)


class ConcatSummaryProvider:
    """Plain concatenation of JD text and recent history texts (no summarisation)."""

    def __init__(self, top_k: int = 5):
        self.top_k = top_k

    def summarize(self, job_id: str, jd_text: str, history_texts: Sequence[str]) -> str:
        return " ".join([jd_text, *history_texts[: self.top_k]]).strip()


class FileSummaryProvider:
    """Summaries produced offline, one ``job_id<TAB>text`` per line."""

    def __init__(self, path: str | Path):
        self.summaries: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    job_id, _, text = line.partition("\t")
                    self.summaries[job_id] = text

    def summarize(self, job_id: str, jd_text: str, history_texts: Sequence[str]) -> str:
        if job_id not in self.summaries:
            raise KeyError(f"no summary for job {job_id!r}")
        return self.summaries[job_id]


# ------------------------------------------------------------ learned parts


@dataclass
class GcnParams:
    """Cross and gate matrices of the gated cross layer.

    Weights are stored input-major so that ``c0 @ w_cross`` equals
    ``(W_c c0)^T`` for the column-vector form.
    """

    w_cross: Tensor
    w_gate: Tensor
    bias: Tensor

    @classmethod
    def init(cls, width: int, rng: np.random.Generator) -> "GcnParams":
        return cls(init_matrix(rng, width, width), init_matrix(rng, width, width), zeros_param(1, width))


def gated_cross(c0: Tensor, p: GcnParams) -> Tensor:
    """c = c0 * (W_c c0 + b) * sigmoid(W_g c0) + c0, row-wise."""
    if c0.cols != p.w_cross.rows:
        raise ad.ShapeError(f"gated_cross: input {c0.shape} vs cross matrix {p.w_cross.shape}")
    cross = ad.linear(c0, p.w_cross, p.bias)
    gate = ad.sigmoid(ad.matmul(c0, p.w_gate))
    return ad.add(ad.mul(ad.mul(c0, cross), gate), c0)


@dataclass
class HistoryAttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    heads: int = 1

    def __post_init__(self):
        if self.w_q.cols % self.heads:
            raise ValueError("head count must divide the projection width")
        if self.heads != 1:
            raise NotImplementedError("only single-head attention is supported")

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "HistoryAttentionParams":
        return cls(init_matrix(rng, dim, dim), init_matrix(rng, dim, dim), init_matrix(rng, dim, dim))


def history_attention(
    current: Tensor, history: Tensor, lengths: np.ndarray, p: HistoryAttentionParams
) -> Tensor:
    """Current talent embedding attends over its history rows.

    ``history`` stacks ``L`` slots per batch row ((B*L) x d); ``lengths`` marks
    how many are real. Empty histories give zero vectors.
    """
    q = ad.matmul(current, p.w_q)
    k = ad.matmul(history, p.w_k)
    v = ad.matmul(history, p.w_v)
    return ad.attention(q, k, v, lengths)


def pad_history(indices: Sequence[Sequence[int]], max_history: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncate to the ``max_history`` most recent items and pad with index 0."""
    n = len(indices)
    width = min(max_history, max((len(h) for h in indices), default=0))
    out = np.zeros((n, width), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, h in enumerate(indices):
        h = list(h)[:width]
        out[i, : len(h)] = h
        lengths[i] = len(h)
    return out, lengths


@dataclass
class JdEncoder:
    """Fine-grained JD embedding: projected gated-cross output + history attention."""

    gcn: GcnParams
    proj_w: Tensor
    proj_b: Tensor
    attn: HistoryAttentionParams

    @classmethod
    def init(cls, text_dim: int, id_dim: int, jd_dim: int, rng: np.random.Generator) -> "JdEncoder":
        width = 2 * text_dim
        if jd_dim <= id_dim:
            raise ValueError("jd_dim must exceed the attention width")
        return cls(
            GcnParams.init(width, rng),
            init_matrix(rng, width, jd_dim - id_dim),
            zeros_param(1, jd_dim - id_dim),
            HistoryAttentionParams.init(id_dim, rng),
        )

    def named_params(self) -> dict[str, Tensor]:
        return {
            "gcn.w_cross": self.gcn.w_cross,
            "gcn.w_gate": self.gcn.w_gate,
            "gcn.bias": self.gcn.bias,
            "jd.proj.w": self.proj_w,
            "jd.proj.b": self.proj_b,
            "attn.w_q": self.attn.w_q,
            "attn.w_k": self.attn.w_k,
            "attn.w_v": self.attn.w_v,
        }


def build_jd_embedding(
    c0: Tensor,
    current_talent: Tensor,
    history: Tensor,
    lengths: np.ndarray,
    enc: JdEncoder,
) -> Tensor:
    """e_j = [proj(gated_cross(c0)); attention(e_t, history)].

    ``c0`` is the row-wise concatenation of the JD-summary and resume text
    embeddings.
    """
    c = gated_cross(c0, enc.gcn)
    projected = ad.linear(c, enc.proj_w, enc.proj_b)
    attended = history_attention(current_talent, history, lengths, enc.attn)
    return ad.concat_cols([projected, attended])
