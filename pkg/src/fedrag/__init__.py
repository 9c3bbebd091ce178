"""Federated retrieval-augmented generation over attested data silos.

Silo clients answer queries from private flat L2 indexes; the orchestrating
server verifies attestation evidence, merges ranked results with reciprocal
rank fusion, and generates an answer through a standalone, cascading, or
confidential inference path, with document payloads sealed end to end.
"""

from .embedding import EmbedderSpec, FeatureHashEmbedder, embed
from .fusion import FusedContext, FusionConfig, RetrievedHit, fuse, rrf_term
from .index import DocumentSnippet, FlatIndex, ScoredHit, build_index, load_index, save_index, search
from .inference import BenchmarkQuestion, PromptTemplate, build_prompt, extract_answer
from .protocol import AnswerRecord, FederationConfig, FederationServer, SiloNode

__version__ = "0.1.0"

__all__ = [
    "AnswerRecord",
    "BenchmarkQuestion",
    "DocumentSnippet",
    "EmbedderSpec",
    "FeatureHashEmbedder",
    "FederationConfig",
    "FederationServer",
    "FlatIndex",
    "FusedContext",
    "FusionConfig",
    "PromptTemplate",
    "RetrievedHit",
    "ScoredHit",
    "SiloNode",
    "build_index",
    "build_prompt",
    "embed",
    "extract_answer",
    "fuse",
    "load_index",
    "rrf_term",
    "save_index",
    "search",
    "__version__",
]
