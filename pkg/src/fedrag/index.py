"""Flat exhaustive L2 vector index over a silo's snippet corpus.

Search is an exact scan: squared Euclidean distance, accumulated left to
right in 64-bit floats over 32-bit stored components, so scores are
bit-reproducible across platforms and match the brute-force oracle exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .embedding import Embedder, EmbedderSpec, EmbeddingVector, build_embedder
from .errors import DimMismatchError, EmptyCorpusError, IndexFormatError

MAGIC = b"FRIX"
FORMAT_VERSION = 1

TEXT_SIDECAR_SUFFIX = ".texts.jsonl"
META_SIDECAR_SUFFIX = ".meta.json"


def content_doc_id(text: str) -> str:
    """Stable content-derived identity: SHA-256 of the snippet text bytes."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DocumentSnippet:
    """One corpus text unit; the thing retrieved, fused, and put into prompts."""

    text: str
    source: str = ""
    meta: dict[str, str] = field(default_factory=dict)
    doc_id: str = ""

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("snippet text must be non-empty")
        expected = content_doc_id(self.text)
        if self.doc_id and self.doc_id != expected:
            raise ValueError("doc_id does not match SHA-256 of text")
        if not self.doc_id:
            object.__setattr__(self, "doc_id", expected)


@dataclass(frozen=True)
class ScoredHit:
    doc_id: str
    score: float
    row: int


@dataclass(frozen=True)
class IndexEntry:
    doc_id: str
    vector: EmbeddingVector
    row: int


def _round_f32(values: EmbeddingVector) -> EmbeddingVector:
    """Round each component to the nearest 32-bit float (stored precision)."""
    packed = struct.pack(f"<{len(values)}f", *values)
    return tuple(struct.unpack(f"<{len(values)}f", packed))


class FlatIndex:
    """Immutable after construction; concurrent searches are safe."""

    def __init__(
        self,
        dim: int,
        spec: EmbedderSpec,
        entries: list[IndexEntry],
        docs: dict[str, DocumentSnippet],
    ) -> None:
        self.dim = dim
        self.spec = spec
        self.entries = entries
        self.docs = docs

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FlatIndex):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.spec == other.spec
            and self.entries == other.entries
            and self.docs == other.docs
        )

    def snippet(self, doc_id: str) -> DocumentSnippet:
        return self.docs[doc_id]


def build_index(
    snippets: list[DocumentSnippet],
    spec: EmbedderSpec,
    embedder: Embedder | None = None,
) -> FlatIndex:
    """Embed and index unique snippets; duplicates by text collapse to one entry."""
    if not snippets:
        raise EmptyCorpusError("cannot build an index over zero snippets")
    return extend_index(FlatIndex(spec.dim, spec, [], {}), snippets, embedder=embedder)


def extend_index(
    index: FlatIndex,
    snippets: list[DocumentSnippet],
    embedder: Embedder | None = None,
) -> FlatIndex:
    """Return a new index with the given snippets appended (content-hash dedup)."""
    embedder = embedder or build_embedder(index.spec)
    entries = list(index.entries)
    docs = dict(index.docs)
    fresh: list[DocumentSnippet] = []
    for snippet in snippets:
        if snippet.doc_id in docs:
            continue
        docs[snippet.doc_id] = snippet
        fresh.append(snippet)
    vectors = embedder.embed_many([s.text for s in fresh])
    for snippet, vec in zip(fresh, vectors):
        entries.append(IndexEntry(snippet.doc_id, _round_f32(vec), len(entries)))
    return FlatIndex(index.dim, index.spec, entries, docs)


def search(index: FlatIndex, query_vec: EmbeddingVector, k: int) -> list[ScoredHit]:
    """Exact top-k by squared L2 distance, ascending; ties broken by ascending row."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(query_vec) != index.dim:
        raise DimMismatchError(
            f"query dim {len(query_vec)} != index dim {index.dim}"
        )
    if not all(math.isfinite(v) for v in query_vec):
        raise DimMismatchError("query vector has non-finite components")
    scored: list[ScoredHit] = []
    for entry in index.entries:
        ev = entry.vector
        s = 0.0
        for d in range(index.dim):
            diff = query_vec[d] - ev[d]
            s += diff * diff
        scored.append(ScoredHit(entry.doc_id, s, entry.row))
    scored.sort(key=lambda h: h.score)  # stable: equal scores keep row order
    return scored[:k]


def save_index(index: FlatIndex, path: str | Path) -> None:
    """Persist to a little-endian binary file plus text and meta sidecars."""
    path = Path(path)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<H", FORMAT_VERSION)
    buf += struct.pack("<I", index.dim)
    buf += struct.pack("<Q", len(index.entries))
    for entry in index.entries:
        raw_id = bytes.fromhex(entry.doc_id)
        if len(raw_id) != 32:
            raise IndexFormatError(f"doc_id is not a 32-byte hex digest: {entry.doc_id!r}")
        buf += raw_id
        buf += struct.pack(f"<{index.dim}f", *entry.vector)
    path.write_bytes(bytes(buf))

    lines = []
    for entry in index.entries:
        snippet = index.docs[entry.doc_id]
        record: dict = {"doc_id": snippet.doc_id, "text": snippet.text, "source": snippet.source}
        if snippet.meta:
            record["meta"] = snippet.meta
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    sidecar = Path(str(path) + TEXT_SIDECAR_SUFFIX)
    sidecar.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    meta = Path(str(path) + META_SIDECAR_SUFFIX)
    meta.write_text(
        json.dumps(index.spec.to_json_dict(), sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )


def load_index(path: str | Path) -> FlatIndex:
    """Load a persisted index; round-trip with save_index is lossless."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 18 or data[:4] != MAGIC:
        raise IndexFormatError("bad magic: not an index file")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported index format version {version}")
    (dim,) = struct.unpack_from("<I", data, 6)
    (count,) = struct.unpack_from("<Q", data, 10)
    entry_size = 32 + 4 * dim
    expected = 18 + count * entry_size
    if len(data) != expected:
        raise IndexFormatError(
            f"truncated or oversized index file: {len(data)} bytes, expected {expected}"
        )

    meta_path = Path(str(path) + META_SIDECAR_SUFFIX)
    if not meta_path.exists():
        raise IndexFormatError(f"missing embedder sidecar {meta_path}")
    spec = EmbedderSpec.from_json_dict(json.loads(meta_path.read_text(encoding="utf-8")))
    if spec.dim != dim:
        raise DimMismatchError(f"sidecar spec dim {spec.dim} != file dim {dim}")

    sidecar_path = Path(str(path) + TEXT_SIDECAR_SUFFIX)
    if not sidecar_path.exists():
        raise IndexFormatError(f"missing text sidecar {sidecar_path}")
    docs: dict[str, DocumentSnippet] = {}
    with sidecar_path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            snippet = DocumentSnippet(
                text=obj["text"],
                source=obj.get("source", ""),
                meta=obj.get("meta", {}),
            )
            if snippet.doc_id != obj["doc_id"]:
                raise IndexFormatError(f"sidecar doc_id mismatch for {obj['doc_id']}")
            docs[snippet.doc_id] = snippet

    entries: list[IndexEntry] = []
    off = 18
    for row in range(count):
        raw_id = data[off : off + 32]
        off += 32
        vector = struct.unpack_from(f"<{dim}f", data, off)
        off += 4 * dim
        if not all(math.isfinite(v) for v in vector):
            raise IndexFormatError("corrupted payload: non-finite vector component")
        doc_id = raw_id.hex()
        if doc_id not in docs:
            raise IndexFormatError(f"doc_id {doc_id} missing from text sidecar")
        entries.append(IndexEntry(doc_id, tuple(float(v) for v in vector), row))
    return FlatIndex(dim, spec, entries, docs)
