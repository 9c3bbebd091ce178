from __future__ import annotations

import hashlib
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedrag.errors import (
    AuthenticationFailure,
    EmptyContextError,
    HandshakeRequiredError,
)
from fedrag.fusion import Contribution, FusedContext, RankedDocument
from fedrag.inference import (
    AuxiliaryAnswer,
    BenchmarkQuestion,
    InferenceRequest,
    PromptTemplate,
    StubGenerator,
    build_prompt,
    build_provider_prompt,
    extract_answer,
    infer_cascading,
    infer_confidential,
    infer_standalone,
    serve_sealed_inference,
    truncate_at_whitespace,
)
from fedrag.secure_channel import (
    EPOCH_ATTESTED,
    EPOCH_VERIFIER,
    SecureSession,
    decode_payload,
    encode_payload,
)

TEMPLATE = PromptTemplate()


def make_fused(texts: list[str], query_id: str = "q1") -> FusedContext:
    docs = []
    for rank, text in enumerate(texts):
        docs.append(
            RankedDocument(
                doc_id=hashlib.sha256(text.encode()).hexdigest(),
                text=text,
                source="t",
                rrf_score=1.0 / (61 + rank),
                contributing=(Contribution("c1", rank, 0.1 * rank),),
            )
        )
    return FusedContext(query_id=query_id, documents=tuple(docs), truncated_to=8)


YNM_QUESTION = BenchmarkQuestion(
    qid="q1",
    question_text="Does a dedicated coordinator improve discharge quality?",
    options={"A": "yes", "B": "no", "C": "maybe"},
    gold_label="A",
)


def test_prompt_structure_and_golden_snapshot():
    fused = make_fused([f"snippet number {i} body" for i in range(1, 9)])
    prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION)
    lines = prompt.split("\n")
    assert lines[0] == TEMPLATE.role_preamble
    assert "Here are the relevant documents:" in lines
    for i in range(1, 9):
        assert f"Document {i}: snippet number {i} body" in lines
    qi = lines.index("Question:")
    assert lines[qi + 1] == YNM_QUESTION.question_text
    oi = lines.index("Options:")
    assert lines[oi + 1 : oi + 4] == ["A) yes", "B) no", "C) maybe"]
    assert lines[-1] == "Answer only with the correct option"
    # documents come before the question, question before options
    assert lines.index("Here are the relevant documents:") < qi < oi


def test_aux_section_sits_between_documents_and_question():
    fused = make_fused(["only document"])
    aux = AuxiliaryAnswer(provider_id="p", answer_text="B) no", latency_ms=1.0)
    prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION, aux)
    lines = prompt.split("\n")
    ai = lines.index(TEMPLATE.aux_header)
    assert lines[ai + 1] == "B) no"
    assert lines.index("Document 1: only document") < ai < lines.index("Question:")


def test_prompt_without_aux_has_no_aux_header():
    fused = make_fused(["only document"])
    assert TEMPLATE.aux_header not in build_prompt(TEMPLATE, fused, YNM_QUESTION)


def test_empty_context_rejected():
    empty = FusedContext(query_id="q", documents=(), truncated_to=8)
    with pytest.raises(EmptyContextError):
        build_prompt(TEMPLATE, empty, YNM_QUESTION)


def test_long_document_truncated_at_whitespace():
    long_text = " ".join(f"word{i}" for i in range(1200))
    assert len(long_text) > 5000
    fused = make_fused([long_text])
    prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION)
    doc_line = next(l for l in prompt.split("\n") if l.startswith("Document 1: "))
    rendered = doc_line[len("Document 1: ") :]
    assert len(rendered) <= 1200
    assert rendered.endswith("...")
    assert not rendered[:-3].endswith(" ")  # cut lands on a word boundary


def test_truncate_helper_boundaries():
    assert truncate_at_whitespace("short", 10) == "short"
    out = truncate_at_whitespace("aaaa bbbb cccc", 12)
    assert out == "aaaa bbbb..."
    assert truncate_at_whitespace("x" * 50, 10) == "x" * 7 + "..."


def test_provider_prompt_contains_no_documents():
    prompt = build_provider_prompt(TEMPLATE, YNM_QUESTION)
    assert "Document" not in prompt
    assert TEMPLATE.docs_header not in prompt
    assert YNM_QUESTION.question_text in prompt
    assert "A) yes" in prompt


def test_stub_picks_max_overlap_option():
    fused = make_fused(["the committee voted no no no decisively", "another no vote recorded"])
    prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION)
    stub = StubGenerator(TEMPLATE)
    assert stub.generate(InferenceRequest(prompt=prompt)) == "B) no"


def test_stub_tie_goes_to_first_label():
    fused = make_fused(["entirely unrelated filler text"])
    prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION)
    assert StubGenerator(TEMPLATE).generate(InferenceRequest(prompt=prompt)) == "A) yes"


def test_stub_without_options_falls_back_to_a():
    q = BenchmarkQuestion(qid="q", question_text="free text question", options={})
    fused = make_fused(["some document"])
    prompt = build_prompt(TEMPLATE, fused, q)
    assert StubGenerator(TEMPLATE).generate(InferenceRequest(prompt=prompt)) == "A"


def test_stub_counts_aux_text_in_overlap():
    fused = make_fused(["neutral filler content"])
    aux = AuxiliaryAnswer(provider_id="p", answer_text="maybe maybe", latency_ms=0.0)
    prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION, aux)
    assert StubGenerator(TEMPLATE).generate(InferenceRequest(prompt=prompt)) == "C) maybe"


def test_extract_rule1_leading_label():
    options = YNM_QUESTION.options
    assert extract_answer("B) no", options).label == "B"
    assert extract_answer("  C. because reasons", options).label == "C"
    assert extract_answer("b", options).label == "B"


def test_extract_rule2_answer_is():
    options = YNM_QUESTION.options
    assert extract_answer("The correct answer is C because...", options).label == "C"
    assert extract_answer("I would go with option B here", options).label == "B"


def test_extract_rule3_unique_option_text():
    options = {"A": "aspirin therapy", "B": "watchful waiting"}
    res = extract_answer("the best course is watchful waiting", options)
    assert res.label == "B" and not res.flagged


def test_extract_fallback_is_flagged():
    res = extract_answer("completely unrelated rambling", {"A": "xq1", "B": "xq2"})
    assert res.label == "A" and res.flagged


@given(st.text(max_size=120))
def test_extract_total_and_deterministic(text):
    options = {"A": "yes", "B": "no", "C": "maybe"}
    first = extract_answer(text, options)
    assert first == extract_answer(text, options)
    assert first.label in options


def test_cascading_without_provider_equals_standalone():
    fused = make_fused(["the answer here is no no no"])
    stub = StubGenerator(TEMPLATE)
    prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION)
    standalone = infer_standalone(InferenceRequest(prompt=prompt), stub)
    cascaded = infer_cascading(TEMPLATE, fused, YNM_QUESTION, stub, provider=None)
    assert cascaded.text == standalone.text
    assert cascaded.degraded is True


class FailingProvider:
    provider_id = "failing"

    def generate(self, prompt: str, max_tokens: int) -> str:
        raise ConnectionError("provider down")


class CannedProvider:
    provider_id = "canned"

    def __init__(self, text: str) -> None:
        self.text = text
        self.prompts: list[str] = []

    def generate(self, prompt: str, max_tokens: int) -> str:
        self.prompts.append(prompt)
        return self.text


def test_cascading_provider_failure_degrades():
    fused = make_fused(["the committee said no twice: no no"])
    stub = StubGenerator(TEMPLATE)
    prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION)
    standalone = infer_standalone(InferenceRequest(prompt=prompt), stub)
    cascaded = infer_cascading(TEMPLATE, fused, YNM_QUESTION, stub, FailingProvider())
    assert cascaded.text == standalone.text
    assert cascaded.degraded


def test_cascading_aux_influences_answer():
    fused = make_fused(["neutral content only"])
    provider = CannedProvider("maybe maybe maybe")
    result = infer_cascading(TEMPLATE, fused, YNM_QUESTION, StubGenerator(TEMPLATE), provider)
    assert result.text == "C) maybe"
    assert not result.degraded
    assert all("neutral content only" not in p for p in provider.prompts)


def test_cascading_garbage_aux_is_harmless_context():
    fused = make_fused(["strong no no no no signal"])
    provider = CannedProvider("zzz unparseable garbage zzz")
    result = infer_cascading(TEMPLATE, fused, YNM_QUESTION, StubGenerator(TEMPLATE), provider)
    assert result.text == "B) no"


def make_endpoint_pair() -> tuple[SecureSession, SecureSession]:
    key = bytes(range(32))
    return (
        SecureSession("ep", key, send_epoch=EPOCH_VERIFIER),
        SecureSession("ep", key, send_epoch=EPOCH_ATTESTED),
    )


class LoopbackEndpoint:
    """Endpoint client whose exchange() runs the endpoint logic in-process."""

    def __init__(self, endpoint_session: SecureSession) -> None:
        self.endpoint_session = endpoint_session
        self.seen: list[bytes] = []

    def exchange(self, sealed_wire: bytes) -> bytes:
        self.seen.append(sealed_wire)
        return serve_sealed_inference(
            self.endpoint_session, sealed_wire, StubGenerator(TEMPLATE), TEMPLATE
        )


def test_confidential_round_trip_matches_local_stub():
    server_side, endpoint_side = make_endpoint_pair()
    fused = make_fused(["the committee said no no no"], query_id="deadbeef")
    endpoint = LoopbackEndpoint(endpoint_side)
    result = infer_confidential(fused, YNM_QUESTION, server_side, endpoint)
    local_prompt = build_prompt(TEMPLATE, fused, YNM_QUESTION)
    local = StubGenerator(TEMPLATE).generate(InferenceRequest(prompt=local_prompt))
    assert result.text == local == "B) no"


def test_confidential_request_bytes_are_ciphertext_only():
    server_side, endpoint_side = make_endpoint_pair()
    secret = "extremely secret snippet content nobody may see"
    fused = make_fused([secret], query_id="deadbeef")
    endpoint = LoopbackEndpoint(endpoint_side)
    infer_confidential(fused, YNM_QUESTION, server_side, endpoint)
    assert len(endpoint.seen) == 1
    assert secret.encode() not in endpoint.seen[0]


def test_confidential_requires_session():
    fused = make_fused(["doc"], query_id="q")
    with pytest.raises(HandshakeRequiredError):
        infer_confidential(fused, YNM_QUESTION, None, LoopbackEndpoint(make_endpoint_pair()[1]))


def test_confidential_tampered_response_rejected():
    server_side, endpoint_side = make_endpoint_pair()
    fused = make_fused(["document body"], query_id="deadbeef")

    class TamperingEndpoint(LoopbackEndpoint):
        def exchange(self, sealed_wire: bytes) -> bytes:
            good = super().exchange(sealed_wire)
            payload = decode_payload(good)
            bad_ct = bytes([payload.ciphertext[0] ^ 1]) + payload.ciphertext[1:]
            return encode_payload(
                type(payload)(payload.key_id, payload.nonce, payload.aad, bad_ct, payload.tag)
            )

    with pytest.raises(AuthenticationFailure):
        infer_confidential(fused, YNM_QUESTION, server_side, TamperingEndpoint(endpoint_side))


def test_confidential_wire_format_is_json_under_the_hood():
    # endpoint request decodes back into documents + question via the shared codec
    from fedrag.inference import decode_confidential_request, encode_confidential_request

    fused = make_fused(["first body", "second body"], query_id="q9")
    blob = encode_confidential_request(fused, YNM_QUESTION)
    parsed = json.loads(blob.decode())
    assert [d["text"] for d in parsed["documents"]] == ["first body", "second body"]
    assert "gold" not in parsed and "gold_label" not in json.dumps(parsed)
    redecoded_fused, redecoded_q, template_id = decode_confidential_request(blob)
    assert [d.text for d in redecoded_fused.documents] == ["first body", "second body"]
    assert redecoded_q.options == YNM_QUESTION.options
    assert template_id == "default"
