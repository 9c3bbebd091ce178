"""Merge per-silo ranked lists into one context ranking via reciprocal rank fusion.

Each document's fused score is the sum over client lists of
``1 / (k_rrf + rank + 1)`` where rank is its 0-based position in that
client's list. Documents appearing in several lists merge into one entry
(content-hash identity), so corroboration across silos boosts rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import EmptyFederationError


@dataclass(frozen=True)
class FusionConfig:
    k_rrf: int = 60
    context_k: int = 8

    def __post_init__(self) -> None:
        if self.k_rrf < 1:
            raise ValueError("k_rrf must be >= 1")
        if self.context_k < 1:
            raise ValueError("context_k must be >= 1")


@dataclass(frozen=True)
class RetrievedHit:
    """One document as returned by a silo, with its raw distance score."""

    doc_id: str
    text: str
    source: str
    l2_score: float


@dataclass(frozen=True)
class Contribution:
    client_id: str
    rank: int
    l2_score: float


@dataclass(frozen=True)
class RankedDocument:
    doc_id: str
    text: str
    source: str
    rrf_score: float
    contributing: tuple[Contribution, ...]


@dataclass(frozen=True)
class FusedContext:
    query_id: str
    documents: tuple[RankedDocument, ...]
    truncated_to: int

    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]


def rrf_term(rank: int, k_rrf: int) -> float:
    """Reciprocal-rank term for a 0-based rank: 1 / (k_rrf + rank + 1)."""
    return 1.0 / (k_rrf + rank + 1)


def fuse(
    lists: Mapping[str, Sequence[RetrievedHit]],
    cfg: FusionConfig,
    query_id: str = "",
) -> FusedContext:
    """Merge, dedupe, and re-rank client result lists into a fused context.

    Output is sorted by rrf_score descending with doc_id ascending as the
    tie-break, truncated to cfg.context_k. Raw L2 scores are carried as
    provenance only; they never enter the fused score.
    """
    if not lists:
        raise EmptyFederationError("fuse requires at least one client result list")

    scores: dict[str, float] = {}
    contributions: dict[str, list[Contribution]] = {}
    first_seen: dict[str, RetrievedHit] = {}

    for client_id in sorted(lists):
        hits = lists[client_id]
        prev = None
        for rank, hit in enumerate(hits):
            if prev is not None and hit.l2_score < prev:
                raise ValueError(f"client {client_id} list not sorted ascending by l2_score")
            prev = hit.l2_score
            scores[hit.doc_id] = scores.get(hit.doc_id, 0.0) + rrf_term(rank, cfg.k_rrf)
            contributions.setdefault(hit.doc_id, []).append(
                Contribution(client_id, rank, hit.l2_score)
            )
            first_seen.setdefault(hit.doc_id, hit)

    order = sorted(scores, key=lambda doc_id: (-scores[doc_id], doc_id))
    documents = tuple(
        RankedDocument(
            doc_id=doc_id,
            text=first_seen[doc_id].text,
            source=first_seen[doc_id].source,
            rrf_score=scores[doc_id],
            contributing=tuple(contributions[doc_id]),
        )
        for doc_id in order[: cfg.context_k]
    )
    return FusedContext(query_id=query_id, documents=documents, truncated_to=cfg.context_k)
