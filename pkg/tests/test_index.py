from __future__ import annotations

import hashlib
import random
import struct

import pytest

from fedrag.embedding import EmbedderSpec, FeatureHashEmbedder
from fedrag.errors import DimMismatchError, EmptyCorpusError, IndexFormatError
from fedrag.index import (
    DocumentSnippet,
    FlatIndex,
    IndexEntry,
    build_index,
    content_doc_id,
    extend_index,
    load_index,
    save_index,
    search,
)

SPEC16 = EmbedderSpec(kind="feature_hash", dim=16, normalize=True)

GOLDEN_SNIPPETS = [
    DocumentSnippet(text="alpha beta gamma delta", source="g"),
    DocumentSnippet(text="epsilon zeta eta theta", source="g"),
    DocumentSnippet(text="iota kappa lambda mu", source="g"),
]
GOLDEN_INDEX_SHA256 = "902fed707b24e4c2816a4ac4c682afacd9b51e8b06749a27df90b50e7c5af1db"
GOLDEN_SIDECAR_SHA256 = "4696b7c28c668d4e68035a7d14b1223a5fb68d421629e5c5394f8a06c7d28b21"


def oracle_scan(index: FlatIndex, query, k):
    """Independent exhaustive scan with the same tie rule (ascending row)."""
    rows = []
    for entry in index.entries:
        s = 0.0
        for d in range(index.dim):
            diff = query[d] - entry.vector[d]
            s += diff * diff
        rows.append((s, entry.row, entry.doc_id))
    rows.sort(key=lambda t: (t[0], t[1]))
    return rows[:k]


def random_index(rng: random.Random, n: int, dim: int) -> FlatIndex:
    spec = EmbedderSpec(kind="feature_hash", dim=dim, normalize=True)
    entries = []
    docs = {}
    for row in range(n):
        text = f"doc {row} " + " ".join(str(rng.randrange(1000)) for _ in range(4))
        snippet = DocumentSnippet(text=text, source="rand")
        raw = [rng.uniform(-1, 1) for _ in range(dim)]
        vec = tuple(struct.unpack(f"<{dim}f", struct.pack(f"<{dim}f", *raw)))
        entries.append(IndexEntry(snippet.doc_id, vec, row))
        docs[snippet.doc_id] = snippet
    return FlatIndex(dim, spec, entries, docs)


def test_doc_id_is_content_hash():
    s = DocumentSnippet(text="hello world", source="x")
    assert s.doc_id == hashlib.sha256(b"hello world").hexdigest()
    assert content_doc_id("hello world") == s.doc_id


def test_build_preserves_insertion_order():
    idx = build_index(GOLDEN_SNIPPETS, SPEC16)
    assert len(idx) == 3
    assert [e.row for e in idx.entries] == [0, 1, 2]
    assert [e.doc_id for e in idx.entries] == [s.doc_id for s in GOLDEN_SNIPPETS]


def test_duplicate_texts_collapse():
    snippets = [
        DocumentSnippet(text="same text here", source="a"),
        DocumentSnippet(text="other text there", source="a"),
        DocumentSnippet(text="same text here", source="b"),
    ]
    idx = build_index(snippets, SPEC16)
    assert len(idx) == 2


def test_empty_corpus_rejected():
    with pytest.raises(EmptyCorpusError):
        build_index([], SPEC16)


def test_self_query_scores_zero():
    idx = build_index(GOLDEN_SNIPPETS, SPEC16)
    hits = search(idx, idx.entries[1].vector, 1)
    assert hits[0].doc_id == GOLDEN_SNIPPETS[1].doc_id
    assert hits[0].score == 0.0


def test_k_saturates_at_corpus_size():
    idx = build_index(GOLDEN_SNIPPETS, SPEC16)
    query = FeatureHashEmbedder(SPEC16).embed("alpha")
    assert len(search(idx, query, 50)) == 3


def test_empty_index_returns_empty():
    idx = FlatIndex(16, SPEC16, [], {})
    query = FeatureHashEmbedder(SPEC16).embed("anything")
    assert search(idx, query, 5) == []


def test_dim_mismatch_rejected():
    idx = build_index(GOLDEN_SNIPPETS, SPEC16)
    with pytest.raises(DimMismatchError):
        search(idx, (0.0,) * 8, 3)


def test_search_matches_oracle_50_docs():
    rng = random.Random(1234)
    idx = random_index(rng, 50, 16)
    query = tuple(rng.uniform(-1, 1) for _ in range(16))
    hits = search(idx, query, 8)
    expected = oracle_scan(idx, query, 8)
    assert [(h.score, h.row, h.doc_id) for h in hits] == expected


def test_prefix_property():
    rng = random.Random(99)
    idx = random_index(rng, 30, 8)
    query = tuple(rng.uniform(-1, 1) for _ in range(8))
    for k in range(1, 12):
        assert search(idx, query, k) == search(idx, query, k + 1)[:k]


def test_tie_break_by_row():
    spec = EmbedderSpec(kind="feature_hash", dim=2, normalize=False)
    docs = {}
    entries = []
    vectors = [(1.0, 0.0), (0.0, 2.0), (1.0, 0.0)]
    for row, text in enumerate(["first doc text", "second doc text", "third doc text"]):
        s = DocumentSnippet(text=text)
        docs[s.doc_id] = s
        entries.append(IndexEntry(s.doc_id, vectors[row], row))
    idx = FlatIndex(2, spec, entries, docs)
    hits = search(idx, (0.0, 0.0), 3)
    # rows 0 and 2 tie at distance 1.0 and must come back in row order
    assert [h.row for h in hits] == [0, 2, 1]
    assert hits[0].score == hits[1].score == 1.0


def test_save_load_round_trip(tmp_path):
    idx = build_index(GOLDEN_SNIPPETS, SPEC16)
    path = tmp_path / "idx.frix"
    save_index(idx, path)
    loaded = load_index(path)
    assert loaded == idx


def test_round_trip_preserves_meta(tmp_path):
    snippets = [DocumentSnippet(text="with meta", source="s", meta={"k": "v"})]
    idx = build_index(snippets, SPEC16)
    save_index(idx, tmp_path / "m.frix")
    loaded = load_index(tmp_path / "m.frix")
    assert loaded.docs[snippets[0].doc_id].meta == {"k": "v"}


def test_truncated_file_detected(tmp_path):
    idx = build_index(GOLDEN_SNIPPETS, SPEC16)
    path = tmp_path / "idx.frix"
    save_index(idx, path)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(IndexFormatError):
        load_index(path)


def test_bad_magic_detected(tmp_path):
    path = tmp_path / "junk.frix"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(IndexFormatError):
        load_index(path)


def test_golden_file_bytes(tmp_path):
    idx = build_index(GOLDEN_SNIPPETS, SPEC16)
    path = tmp_path / "golden.frix"
    save_index(idx, path)
    assert hashlib.sha256(path.read_bytes()).hexdigest() == GOLDEN_INDEX_SHA256
    sidecar = (tmp_path / "golden.frix.texts.jsonl").read_bytes()
    assert hashlib.sha256(sidecar).hexdigest() == GOLDEN_SIDECAR_SHA256


def test_extend_dedups_against_existing():
    idx = build_index(GOLDEN_SNIPPETS, SPEC16)
    extended = extend_index(idx, [GOLDEN_SNIPPETS[0], DocumentSnippet(text="brand new")])
    assert len(extended) == 4
    assert extended.entries[3].row == 3
