"""Chunking, embedding and top-k cosine retrieval over course materials.

Corpora are course-scale (hundreds of chunks), so the index is a flat
in-memory scan: exact ranking, trivially matched by a brute-force
oracle. The default embedder is a deterministic hashed bag-of-words
(sha-256 token hashing into a 256-dim vector, L2-normalized), a pure
function of the token multiset, so offline tests get real rankings.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import AulaError

EMBED_DIM = 256
_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class EmptyDocument(AulaError):
    pass


class EmptyStore(AulaError):
    pass


@dataclass(frozen=True)
class ChunkPolicy:
    size: int = 800
    overlap: int = 80

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError("chunk size must be >= 1")
        if not 0 <= self.overlap < self.size:
            raise ValueError("overlap must be in [0, size)")


@dataclass(frozen=True)
class Chunk:
    id: str
    source_doc: str
    span: tuple[int, int]
    text: str
    embedding: np.ndarray
    agents: tuple[str, ...] = ()


def hash_embed(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Hashed bag-of-words embedding; L2-normalized, dtype float32."""
    vec = np.zeros(dim, dtype=np.float64)
    for token in _TOKEN_RE.findall(text.lower()):
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        vec[int.from_bytes(digest[:4], "little") % dim] += 1.0
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec.astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a64, b64) / (na * nb))


def chunk_spans(length: int, policy: ChunkPolicy) -> list[tuple[int, int]]:
    """Cover [0, length) with windows of policy.size overlapping by policy.overlap."""
    spans: list[tuple[int, int]] = []
    step = policy.size - policy.overlap
    start = 0
    while True:
        end = min(start + policy.size, length)
        spans.append((start, end))
        if end >= length:
            return spans
        start += step


class RagStore:
    """Flat store of embedded chunks with per-agent bindings.

    Reads are freely concurrent; callers serialize ingestion (one writer
    at a time), which the preparation pipeline already guarantees.
    """

    def __init__(self, embedder: Callable[[str], np.ndarray] | None = None,
                 dim: int = EMBED_DIM) -> None:
        self.dim = dim
        self.embedder = embedder or (lambda text: hash_embed(text, dim))
        self.chunks: list[Chunk] = []

    def __len__(self) -> int:
        return len(self.chunks)

    def ingest_material(self, doc_id: str, text: str,
                        policy: ChunkPolicy | None = None,
                        agents: Iterable[str] = ()) -> list[str]:
        """Chunk and embed one document; returns the new chunk ids."""
        if not text:
            raise EmptyDocument(f"document {doc_id!r} is empty")
        policy = policy or ChunkPolicy()
        bound = tuple(agents)
        ids: list[str] = []
        for start, end in chunk_spans(len(text), policy):
            piece = text[start:end]
            embedding = np.asarray(self.embedder(piece), dtype=np.float32)
            if embedding.shape != (self.dim,):
                raise ValueError(
                    f"embedder returned shape {embedding.shape}, expected ({self.dim},)")
            chunk_id = f"{doc_id}:{start}-{end}"
            self.chunks.append(Chunk(chunk_id, doc_id, (start, end), piece, embedding, bound))
            ids.append(chunk_id)
        return ids

    def _candidates(self, agent: str | None) -> list[Chunk]:
        if agent is None:
            return list(self.chunks)
        return [c for c in self.chunks if agent in c.agents]

    def retrieve(self, query: str, k: int, agent: str | None = None) -> list[tuple[Chunk, float]]:
        """Top-k chunks by cosine similarity; ties broken by chunk id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        candidates = self._candidates(agent)
        if not candidates:
            raise EmptyStore(f"no chunks available for agent {agent!r}")
        q = np.asarray(self.embedder(query), dtype=np.float32)
        scored = [(c, cosine(c.embedding, q)) for c in candidates]
        scored.sort(key=lambda pair: (-pair[1], pair[0].id))
        return scored[: min(k, len(scored))]

    # Persistence: chunk manifest (JSON) plus a float32 little-endian
    # vector table, one row per chunk in manifest order.

    def manifest_bytes(self) -> bytes:
        entries = [
            {
                "id": c.id,
                "source_doc": c.source_doc,
                "span": list(c.span),
                "text": c.text,
                "agents": list(c.agents),
            }
            for c in self.chunks
        ]
        doc = {"dim": self.dim, "chunks": entries}
        return (json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")

    def vectors_bytes(self) -> bytes:
        if not self.chunks:
            return b""
        table = np.stack([c.embedding for c in self.chunks]).astype("<f4")
        return table.tobytes()

    @classmethod
    def from_bytes(cls, manifest: bytes, vectors: bytes,
                   embedder: Callable[[str], np.ndarray] | None = None) -> "RagStore":
        doc = json.loads(manifest.decode("utf-8"))
        store = cls(embedder=embedder, dim=int(doc["dim"]))
        entries = doc["chunks"]
        table = np.frombuffer(vectors, dtype="<f4")
        if entries:
            table = table.reshape(len(entries), store.dim)
        for row, entry in enumerate(entries):
            store.chunks.append(
                Chunk(
                    entry["id"],
                    entry["source_doc"],
                    (int(entry["span"][0]), int(entry["span"][1])),
                    entry["text"],
                    np.array(table[row], dtype=np.float32),
                    tuple(entry["agents"]),
                )
            )
        return store
