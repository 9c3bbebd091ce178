"""Prompt construction and the three generation paths.

Standalone runs a local backend on the fused documents; cascading first asks
an untrusted third-party provider the bare question (never silo documents)
and feeds its answer back in as extra context; confidential ships the fused
context to a remote endpoint as sealed ciphertext it alone can open.

The default local backend is a deterministic stub that picks the option with
maximal token overlap against the document (and auxiliary) text, which makes
end-to-end accuracy a computable number in tests. Real model backends plug
in behind the same contracts.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

import httpx

from .clock import Clock, SystemClock
from .embedding import tokenize
from .errors import (
    AuthenticationFailure,
    BackendUnavailableError,
    EmptyContextError,
    EndpointUnreachableError,
    InferenceError,
)
from .fusion import FusedContext, RankedDocument
from .secure_channel import SecureSession, decode_payload, encode_payload
from .wire import make_aad

DEFAULT_MAX_TOKENS = 256
DEFAULT_MAX_DOC_CHARS = 1200

AAD_CONFIDENTIAL_REQUEST = "confidential-infer"
AAD_CONFIDENTIAL_RESULT = "confidential-infer-result"


@dataclass(frozen=True)
class PromptTemplate:
    role_preamble: str = (
        "You are a careful domain expert. Use the documents below to answer the question."
    )
    docs_header: str = "Here are the relevant documents:"
    aux_header: str = "Auxiliary answer from external model:"
    question_header: str = "Question:"
    options_header: str = "Options:"
    answer_instruction: str = "Answer only with the correct option"
    max_doc_chars: int = DEFAULT_MAX_DOC_CHARS


@dataclass(frozen=True)
class BenchmarkQuestion:
    qid: str
    question_text: str
    options: dict[str, str] = field(default_factory=dict)
    gold_label: str = ""

    def labels(self) -> list[str]:
        return sorted(self.options)


@dataclass(frozen=True)
class InferenceRequest:
    prompt: str
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = 0.0


@dataclass(frozen=True)
class InferenceResponse:
    text: str
    backend_id: str
    latency_ms: float
    degraded: bool = False
    token_counts: dict[str, int] | None = None


@dataclass(frozen=True)
class AuxiliaryAnswer:
    provider_id: str
    answer_text: str
    latency_ms: float


def truncate_at_whitespace(text: str, max_chars: int) -> str:
    """Cap text to max_chars, cutting at a whitespace boundary with a '...' suffix."""
    if len(text) <= max_chars:
        return text
    cut = text[: max_chars - 3]
    if not text[max_chars - 3].isspace():
        last_ws = max(cut.rfind(" "), cut.rfind("\n"), cut.rfind("\t"))
        if last_ws > 0:
            cut = cut[:last_ws]
    return cut.rstrip() + "..."


def build_prompt(
    template: PromptTemplate,
    fused: FusedContext,
    question: BenchmarkQuestion,
    aux: AuxiliaryAnswer | None = None,
) -> str:
    """Render the augmented prompt; a pure function of its inputs."""
    if not fused.documents:
        raise EmptyContextError("cannot build a prompt with zero context documents")
    parts: list[str] = [template.role_preamble, "", template.docs_header, ""]
    for i, doc in enumerate(fused.documents, start=1):
        parts.append(f"Document {i}: {truncate_at_whitespace(doc.text, template.max_doc_chars)}")
        parts.append("")
    if aux is not None:
        parts.append(template.aux_header)
        parts.append(aux.answer_text)
        parts.append("")
    parts.append(template.question_header)
    parts.append(question.question_text)
    parts.append("")
    if question.options:
        parts.append(template.options_header)
        for label in question.labels():
            parts.append(f"{label}) {question.options[label]}")
        parts.append("")
    parts.append(template.answer_instruction)
    return "\n".join(parts)


def build_provider_prompt(template: PromptTemplate, question: BenchmarkQuestion) -> str:
    """Question-only prompt for the untrusted provider: no silo documents, ever."""
    parts = [template.question_header, question.question_text, ""]
    if question.options:
        parts.append(template.options_header)
        for label in question.labels():
            parts.append(f"{label}) {question.options[label]}")
        parts.append("")
    parts.append(template.answer_instruction)
    return "\n".join(parts)


@dataclass(frozen=True)
class ExtractedAnswer:
    label: str
    flagged: bool


def extract_answer(response_text: str, options: Mapping[str, str]) -> ExtractedAnswer:
    """Deterministic answer-label extraction cascade; total via a flagged fallback."""
    if not options:
        raise ValueError("options must be non-empty")
    labels = sorted(options)

    tokens = response_text.split()
    if tokens:
        first = tokens[0].rstrip(").:").upper()
        for label in labels:
            if first == label.upper():
                return ExtractedAnswer(label, flagged=False)

    label_alt = "|".join(re.escape(label) for label in labels)
    for pattern in (rf"answer is\s+({label_alt})\b", rf"option\s+({label_alt})\b"):
        m = re.search(pattern, response_text, flags=re.IGNORECASE)
        if m:
            found = m.group(1).upper()
            for label in labels:
                if found == label.upper():
                    return ExtractedAnswer(label, flagged=False)

    lowered = response_text.lower()
    substring_hits = [
        label
        for label in labels
        if options[label].strip() and options[label].strip().lower() in lowered
    ]
    if len(substring_hits) == 1:
        return ExtractedAnswer(substring_hits[0], flagged=False)

    return ExtractedAnswer(labels[0], flagged=True)


class GeneratorBackend(Protocol):
    backend_id: str

    def generate(self, request: InferenceRequest) -> str: ...


class StubGenerator:
    """Deterministic overlap-scoring generator.

    Parses the document and auxiliary sections plus the option lines out of
    the prompt, counts how often each option's tokens occur in that context,
    and answers with the best-scoring label (ties go to the first label).
    """

    backend_id = "stub-overlap"

    def __init__(self, template: PromptTemplate | None = None) -> None:
        self.template = template or PromptTemplate()

    def generate(self, request: InferenceRequest) -> str:
        context, options = self._parse(request.prompt)
        if not options:
            return "A"
        counts = Counter(tokenize(context))
        best_label, best_text, best_score = None, "", -1
        for label, text in options:
            score = sum(counts[tok] for tok in tokenize(text))
            if score > best_score:
                best_label, best_text, best_score = label, text, score
        return f"{best_label}) {best_text}"

    def _parse(self, prompt: str) -> tuple[str, list[tuple[str, str]]]:
        t = self.template
        lines = prompt.split("\n")
        context_parts: list[str] = []
        options: list[tuple[str, str]] = []
        section = None
        for line in lines:
            if line == t.docs_header:
                section = "docs"
                continue
            if line == t.aux_header:
                section = "aux"
                continue
            if line == t.question_header:
                section = "question"
                continue
            if line == t.options_header:
                section = "options"
                continue
            if line == t.answer_instruction:
                section = None
                continue
            if section == "docs":
                context_parts.append(re.sub(r"^Document \d+: ", "", line))
            elif section == "aux":
                context_parts.append(line)
            elif section == "options":
                m = re.match(r"^([A-Z])\) (.*)$", line)
                if m:
                    options.append((m.group(1), m.group(2)))
        return "\n".join(context_parts), options


class HttpChatBackend:
    """OpenAI-compatible chat-completions client for a real local model."""

    def __init__(self, base_url: str, model: str, timeout_s: float = 120.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout_s = timeout_s
        self.backend_id = f"http-chat:{model}"

    def generate(self, request: InferenceRequest) -> str:
        try:
            resp = httpx.post(
                f"{self.base_url}/v1/chat/completions",
                json={
                    "model": self.model,
                    "messages": [{"role": "user", "content": request.prompt}],
                    "max_tokens": request.max_tokens,
                    "temperature": request.temperature,
                },
                timeout=self.timeout_s,
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise BackendUnavailableError(f"chat backend failed: {exc}") from exc


class ProviderClient(Protocol):
    provider_id: str

    def generate(self, prompt: str, max_tokens: int) -> str: ...


class HttpProviderClient:
    """Minimal third-party provider adapter: POST /generate {prompt, max_tokens}."""

    def __init__(self, base_url: str, provider_id: str = "provider", timeout_s: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.provider_id = provider_id
        self.timeout_s = timeout_s

    def generate(self, prompt: str, max_tokens: int) -> str:
        resp = httpx.post(
            f"{self.base_url}/generate",
            json={"prompt": prompt, "max_tokens": max_tokens},
            timeout=self.timeout_s,
        )
        resp.raise_for_status()
        return resp.json()["text"]


class SealedInferClient(Protocol):
    def exchange(self, sealed_wire: bytes) -> bytes: ...


class HttpSealedInferClient:
    """Confidential endpoint adapter: POST /sealed-infer with sealed payload bytes."""

    def __init__(self, base_url: str, timeout_s: float = 120.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s

    def exchange(self, sealed_wire: bytes) -> bytes:
        try:
            resp = httpx.post(
                f"{self.base_url}/sealed-infer",
                content=sealed_wire,
                headers={"content-type": "application/octet-stream"},
                timeout=self.timeout_s,
            )
            resp.raise_for_status()
            return resp.content
        except httpx.HTTPError as exc:
            raise EndpointUnreachableError(f"confidential endpoint failed: {exc}") from exc


def infer_standalone(
    request: InferenceRequest,
    backend: GeneratorBackend,
    clock: Clock | None = None,
) -> InferenceResponse:
    clock = clock or SystemClock()
    start = clock.now()
    try:
        text = backend.generate(request)
    except BackendUnavailableError:
        raise
    except Exception as exc:
        raise InferenceError(f"generation failed: {exc}") from exc
    return InferenceResponse(
        text=text,
        backend_id=backend.backend_id,
        latency_ms=(clock.now() - start) * 1000.0,
    )


def infer_cascading(
    template: PromptTemplate,
    fused: FusedContext,
    question: BenchmarkQuestion,
    backend: GeneratorBackend,
    provider: ProviderClient | None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    clock: Clock | None = None,
) -> InferenceResponse:
    """Provider answer folded in as context; provider failure degrades to standalone."""
    clock = clock or SystemClock()
    aux: AuxiliaryAnswer | None = None
    degraded = provider is None
    if provider is not None:
        start = clock.now()
        try:
            aux_text = provider.generate(build_provider_prompt(template, question), max_tokens)
            aux = AuxiliaryAnswer(
                provider_id=provider.provider_id,
                answer_text=aux_text,
                latency_ms=(clock.now() - start) * 1000.0,
            )
        except Exception:
            degraded = True
    prompt = build_prompt(template, fused, question, aux)
    response = infer_standalone(
        InferenceRequest(prompt=prompt, max_tokens=max_tokens), backend, clock
    )
    return replace(response, degraded=degraded)


def encode_confidential_request(
    fused: FusedContext, question: BenchmarkQuestion, template_id: str = "default"
) -> bytes:
    obj = {
        "documents": [
            {"doc_id": d.doc_id, "text": d.text, "source": d.source} for d in fused.documents
        ],
        "qid": question.qid,
        "question": question.question_text,
        "options": {label: question.options[label] for label in question.labels()},
        "template": template_id,
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def decode_confidential_request(data: bytes) -> tuple[FusedContext, BenchmarkQuestion, str]:
    obj = json.loads(data.decode("utf-8"))
    documents = tuple(
        RankedDocument(
            doc_id=d["doc_id"],
            text=d["text"],
            source=d.get("source", ""),
            rrf_score=0.0,
            contributing=(),
        )
        for d in obj["documents"]
    )
    fused = FusedContext(query_id="", documents=documents, truncated_to=len(documents))
    question = BenchmarkQuestion(
        qid=obj.get("qid", ""),
        question_text=obj["question"],
        options=dict(obj.get("options", {})),
    )
    return fused, question, obj.get("template", "default")


def serve_sealed_inference(
    session: SecureSession,
    sealed_wire: bytes,
    backend: GeneratorBackend,
    template: PromptTemplate,
    clock: Clock | None = None,
) -> bytes:
    """Endpoint-side handler: open, build the prompt, generate, seal the result.

    This is the reference logic a confidential endpoint runs; tests host it
    behind both the in-process transport and a real HTTP server.
    """
    clock = clock or SystemClock()
    payload = decode_payload(sealed_wire)
    prefix = AAD_CONFIDENTIAL_REQUEST.encode() + b"/"
    if not payload.aad.startswith(prefix):
        raise AuthenticationFailure("payload failed integrity check")
    query_id = payload.aad[len(prefix) :].decode("ascii")
    plaintext = session.open(payload, payload.aad)
    fused, question, _template_id = decode_confidential_request(plaintext)
    response = infer_standalone(
        InferenceRequest(prompt=build_prompt(template, fused, question)), backend, clock
    )
    result = json.dumps(
        {
            "text": response.text,
            "backend_id": response.backend_id,
            "latency_ms": response.latency_ms,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    sealed = session.seal(make_aad(AAD_CONFIDENTIAL_RESULT, query_id), result)
    return encode_payload(sealed)


def infer_confidential(
    fused: FusedContext,
    question: BenchmarkQuestion,
    endpoint_session: SecureSession | None,
    endpoint_client: SealedInferClient,
    template_id: str = "default",
) -> InferenceResponse:
    """Ship the fused context to the confidential endpoint as sealed ciphertext."""
    from .errors import HandshakeRequiredError

    if endpoint_session is None:
        raise HandshakeRequiredError("confidential endpoint has no established session")
    query_id = fused.query_id
    request = encode_confidential_request(fused, question, template_id)
    sealed = endpoint_session.seal(make_aad(AAD_CONFIDENTIAL_REQUEST, query_id), request)
    sealed_response = endpoint_client.exchange(encode_payload(sealed))
    payload = decode_payload(sealed_response)
    plaintext = endpoint_session.open(payload, make_aad(AAD_CONFIDENTIAL_RESULT, query_id))
    obj = json.loads(plaintext.decode("utf-8"))
    return InferenceResponse(
        text=obj["text"],
        backend_id=obj.get("backend_id", "confidential"),
        latency_ms=float(obj.get("latency_ms", 0.0)),
    )
