"""Text-to-vector embedding with a deterministic feature-hashing default.

The default embedder hashes bag-of-words tokens into signed buckets, so
retrieval is exactly reproducible on every platform without any ML runtime.
A remote HTTP embedder can be plugged in behind the same interface for real
models.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import httpx

from .errors import DimMismatchError, EmptyTextError

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_TOKEN_RE = re.compile(r"[0-9a-z]+")

EmbeddingVector = tuple[float, ...]


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; fixed constants give bit-identical buckets everywhere."""
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    """Lowercase and split into ASCII-alphanumeric runs; all else is a separator."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class EmbedderSpec:
    """Embedding configuration shared by every silo in one federation."""

    kind: str = "feature_hash"
    dim: int = 256
    normalize: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("feature_hash", "external"):
            raise ValueError(f"unknown embedder kind: {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "normalize": self.normalize}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EmbedderSpec":
        return cls(kind=obj["kind"], dim=int(obj["dim"]), normalize=bool(obj["normalize"]))


class Embedder:
    """Immutable embedder; safe for concurrent use from many threads."""

    spec: EmbedderSpec

    def embed(self, text: str) -> EmbeddingVector:
        raise NotImplementedError

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self.embed(t) for t in texts]


class FeatureHashEmbedder(Embedder):
    """Signed bag-of-words feature hashing.

    Each token lands in bucket ``fnv1a64(token) % dim`` with sign taken from
    bit 63 of the hash; the vector is the per-bucket sum, L2-normalized when
    the spec asks for it. A token multiset therefore fully determines the
    output, and identical text embeds identically on every platform.
    """

    def __init__(self, spec: EmbedderSpec) -> None:
        if spec.kind != "feature_hash":
            raise ValueError("FeatureHashEmbedder requires kind='feature_hash'")
        self.spec = spec

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise EmptyTextError("cannot embed empty or whitespace-only text")
        dim = self.spec.dim
        values = [0.0] * dim
        for token in tokenize(text):
            h = fnv1a64(token.encode("utf-8"))
            sign = 1.0 if (h >> 63) == 0 else -1.0
            values[h % dim] += sign
        if self.spec.normalize:
            norm = math.sqrt(sum(v * v for v in values))
            if norm > 0.0:
                values = [v / norm for v in values]
        return tuple(values)


class ExternalEmbedder(Embedder):
    """Remote embedding provider speaking a minimal JSON contract.

    POST ``{"texts": [...]}`` to the configured URL and expect
    ``{"vectors": [[...], ...]}`` back, one vector of length ``spec.dim``
    per input text.
    """

    def __init__(self, spec: EmbedderSpec, url: str, timeout_s: float = 30.0) -> None:
        if spec.kind != "external":
            raise ValueError("ExternalEmbedder requires kind='external'")
        self.spec = spec
        self.url = url
        self.timeout_s = timeout_s

    def embed(self, text: str) -> EmbeddingVector:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        for text in texts:
            if not text.strip():
                raise EmptyTextError("cannot embed empty or whitespace-only text")
        resp = httpx.post(self.url, json={"texts": list(texts)}, timeout=self.timeout_s)
        resp.raise_for_status()
        vectors = resp.json()["vectors"]
        out: list[EmbeddingVector] = []
        for vec in vectors:
            if len(vec) != self.spec.dim:
                raise DimMismatchError(
                    f"provider returned dim {len(vec)}, spec requires {self.spec.dim}"
                )
            values = [float(v) for v in vec]
            if not all(math.isfinite(v) for v in values):
                raise DimMismatchError("provider returned a non-finite component")
            out.append(tuple(values))
        return out


def build_embedder(spec: EmbedderSpec, external_url: str | None = None) -> Embedder:
    if spec.kind == "feature_hash":
        return FeatureHashEmbedder(spec)
    if external_url is None:
        raise ValueError("external embedder requires a provider URL")
    return ExternalEmbedder(spec, external_url)


def embed(text: str, spec: EmbedderSpec) -> EmbeddingVector:
    """Embed one text under the given spec (feature_hash kinds only)."""
    return build_embedder(spec).embed(text)
