"""Query lifecycle: broadcast to attested silos, collect sealed responses
under a deadline, fuse, and dispatch to the configured inference path.

The server is the active party. It verifies each silo's attestation evidence
before admitting it, then seals every post-handshake frame under the session
key, so no document plaintext ever crosses the wire. Silos are reactive
nodes: the same handler core runs behind the deterministic in-process
transport and the TCP transport.
"""

from __future__ import annotations

import json
import logging
import math
import secrets
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import wire
from .attestation import (
    AttestationEvidence,
    AttestationVerifier,
    ClientAttester,
    RandomBytes,
    SigningIdentity,
    SiloSession,
    sign_server_confirmation,
    verify_server_confirmation,
)
from .clock import Clock, SystemClock
from .embedding import EmbedderSpec, build_embedder
from .errors import (
    AuthenticationFailure,
    FedRagError,
    InsufficientRespondersError,
)
from .fusion import FusedContext, FusionConfig, RetrievedHit, fuse
from .index import FlatIndex, content_doc_id, search
from .inference import (
    BenchmarkQuestion,
    GeneratorBackend,
    InferenceRequest,
    InferenceResponse,
    PromptTemplate,
    ProviderClient,
    SealedInferClient,
    StubGenerator,
    build_prompt,
    infer_cascading,
    infer_confidential,
    infer_standalone,
)
from .secure_channel import (
    EPOCH_ATTESTED,
    EPOCH_VERIFIER,
    SecureSession,
    decode_payload,
    encode_payload,
)

logger = logging.getLogger("fedrag.protocol")

INFERENCE_MODES = ("standalone", "cascading", "confidential")

ERR_DIM_MISMATCH = "DimMismatch"
ERR_EMBEDDER = "EmbedderError"
ERR_INTERNAL = "Internal"


@dataclass(frozen=True)
class QueryBroadcast:
    query_id: str
    query_text: str
    top_k: int
    deadline_ms: int
    embed_spec: EmbedderSpec

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "query_text": self.query_text,
            "top_k": self.top_k,
            "deadline_ms": self.deadline_ms,
            "embed_spec": self.embed_spec.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "QueryBroadcast":
        return cls(
            query_id=obj["query_id"],
            query_text=obj["query_text"],
            top_k=int(obj["top_k"]),
            deadline_ms=int(obj["deadline_ms"]),
            embed_spec=EmbedderSpec.from_json_dict(obj["embed_spec"]),
        )


@dataclass(frozen=True)
class ClientEndpoint:
    client_id: str
    address: str = ""  # "host:port" for TCP; unused by the in-process transport


@dataclass(frozen=True)
class FederationConfig:
    clients: tuple[ClientEndpoint, ...]
    top_k: int = 8
    k_rrf: int = 60
    context_k: int | None = None  # defaults to top_k
    response_deadline_ms: int = 10_000
    min_responders: int = 1
    inference_mode: str = "standalone"

    def __post_init__(self) -> None:
        if self.inference_mode not in INFERENCE_MODES:
            raise ValueError(f"unknown inference mode {self.inference_mode!r}")
        if self.min_responders > len(self.clients):
            raise ValueError("min_responders exceeds the number of configured clients")

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(k_rrf=self.k_rrf, context_k=self.context_k or self.top_k)


@dataclass(frozen=True)
class AnswerRecord:
    query_id: str
    mode: str
    answer_text: str
    backend_id: str
    degraded: bool
    fused_context: FusedContext
    per_client_timing: dict[str, float]
    responders: tuple[str, ...]
    total_ms: float

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "mode": self.mode,
            "answer_text": self.answer_text,
            "backend_id": self.backend_id,
            "degraded": self.degraded,
            "fused_doc_ids": self.fused_context.doc_ids(),
            "fused_rrf_scores": [d.rrf_score for d in self.fused_context.documents],
            "per_client_timing": dict(sorted(self.per_client_timing.items())),
            "responders": list(self.responders),
            "total_ms": self.total_ms,
        }


class ServerTransport:
    """Message passing as seen by the orchestrating server."""

    def now(self) -> float:
        raise NotImplementedError

    def send(self, dst: str, body: bytes) -> None:
        raise NotImplementedError

    def recv(self, deadline: float) -> tuple[str, bytes] | None:
        """Next (src, frame) or None once the deadline is reached."""
        raise NotImplementedError

    def close(self) -> None:  # pragma: no cover - default no-op
        pass


ReplyFn = Callable[..., None]  # reply(body: bytes, delay_s: float = 0.0)


class AttestedResponder:
    """Reactive side of the attestation handshake, shared by silos and the
    confidential inference endpoint."""

    def __init__(
        self,
        peer_id: str,
        attester: ClientAttester,
        pinned_server_pub: bytes,
        pinned_server_measurement: str,
        refusal_check: Callable[[dict], str | None] | None = None,
    ) -> None:
        self.peer_id = peer_id
        self.attester = attester
        self.pinned_server_pub = pinned_server_pub
        self.pinned_server_measurement = pinned_server_measurement
        self.refusal_check = refusal_check
        self.session: SecureSession | None = None
        self._pending_nonce: bytes | None = None
        self._pending_client_pub: bytes | None = None
        self._lock = threading.Lock()

    def handle_attest_request(self, payload: object, reply: ReplyFn) -> None:
        try:
            assert isinstance(payload, dict)
            if payload["client_id"] != self.peer_id:
                raise ValueError("attest_request addressed to a different peer")
            if self.refusal_check is not None:
                code = self.refusal_check(payload)
                if code is not None:
                    reply(
                        wire.encode_envelope(
                            wire.T_HANDSHAKE_REFUSED,
                            {"client_id": self.peer_id, "code": code},
                        )
                    )
                    return
            nonce = bytes.fromhex(payload["nonce"])
        except (KeyError, ValueError, AssertionError, TypeError) as exc:
            logger.warning("%s: bad attest_request: %s", self.peer_id, exc)
            return
        evidence = self.attester.produce_evidence(nonce)
        with self._lock:
            self._pending_nonce = nonce
            self._pending_client_pub = evidence.client_pub
        reply(
            wire.encode_envelope(
                wire.T_EVIDENCE,
                {"client_id": self.peer_id, "evidence": evidence.to_json_dict()},
            )
        )

    def handle_session_ok(self, payload: object) -> None:
        try:
            assert isinstance(payload, dict)
            key_id = payload["key_id"]
            server_pub = bytes.fromhex(payload["server_pub"])
            server_measurement = payload["server_measurement"]
            signature = bytes.fromhex(payload["signature"])
        except (KeyError, ValueError, AssertionError, TypeError) as exc:
            logger.warning("%s: bad session_ok: %s", self.peer_id, exc)
            return
        with self._lock:
            nonce, client_pub = self._pending_nonce, self._pending_client_pub
            self._pending_nonce = self._pending_client_pub = None
        if nonce is None or client_pub is None:
            logger.warning("%s: session_ok without a handshake in flight", self.peer_id)
            return
        try:
            verify_server_confirmation(
                self.pinned_server_pub,
                self.pinned_server_measurement,
                server_measurement,
                nonce,
                server_pub,
                client_pub,
                key_id,
                signature,
            )
        except FedRagError as exc:
            logger.warning("%s: rejecting server confirmation: %s", self.peer_id, exc)
            return
        key = self.attester.derive_session_key(server_pub)
        with self._lock:
            self.session = SecureSession(key_id, key, send_epoch=EPOCH_ATTESTED)


class SiloNode:
    """Client-side protocol core, transport-agnostic.

    Owns the local index, answers attestation challenges, and serves sealed
    retrieval queries. ``elapsed_provider`` lets the simulation substitute a
    deterministic virtual retrieval time for the measured one.
    """

    def __init__(
        self,
        client_id: str,
        attester: ClientAttester,
        index: FlatIndex,
        pinned_server_pub: bytes,
        pinned_server_measurement: str,
        clock: Clock | None = None,
        elapsed_provider: Callable[[], float] | None = None,
    ) -> None:
        self.client_id = client_id
        self.index = index
        self.clock = clock or SystemClock()
        self.elapsed_provider = elapsed_provider
        self._responder = AttestedResponder(
            client_id,
            attester,
            pinned_server_pub,
            pinned_server_measurement,
            refusal_check=self._check_embed_spec,
        )
        self._lock = threading.Lock()

    @property
    def session(self) -> SecureSession | None:
        return self._responder.session

    def _check_embed_spec(self, payload: dict) -> str | None:
        spec = EmbedderSpec.from_json_dict(payload["embed_spec"])
        return None if spec == self.index.spec else ERR_DIM_MISMATCH

    def on_frame(self, body: bytes, reply: ReplyFn) -> None:
        try:
            msg_type, payload = wire.decode_envelope(body)
        except wire.MalformedFrameError:
            logger.warning("silo %s: dropping malformed frame", self.client_id)
            return
        if msg_type == wire.T_ATTEST_REQUEST:
            self._responder.handle_attest_request(payload, reply)
        elif msg_type == wire.T_SESSION_OK:
            self._responder.handle_session_ok(payload)
        elif msg_type == wire.T_SESSION_DENIED:
            logger.warning("silo %s: session denied: %s", self.client_id, payload)
        elif msg_type == wire.T_QUERY:
            self._handle_query(payload, reply)
        else:
            logger.warning("silo %s: ignoring frame type %r", self.client_id, msg_type)

    def _handle_query(self, payload: object, reply: ReplyFn) -> None:
        session = self._responder.session
        if session is None:
            logger.warning("silo %s: query before session establishment", self.client_id)
            return
        try:
            sealed = decode_payload(wire.decode_sealed_field(payload))
            prefix = wire.T_QUERY.encode() + b"/"
            if not sealed.aad.startswith(prefix):
                raise AuthenticationFailure("wrong aad type")
            query_id = sealed.aad[len(prefix) :].decode("ascii")
            plaintext = session.open(sealed, sealed.aad)
            broadcast = QueryBroadcast.from_json_dict(json.loads(plaintext.decode()))
            if broadcast.query_id != query_id:
                raise AuthenticationFailure("query id mismatch")
        except (wire.MalformedFrameError, AuthenticationFailure, ValueError, KeyError) as exc:
            logger.warning("silo %s: dropping bad query frame: %s", self.client_id, exc)
            return

        started = time.perf_counter()
        try:
            if broadcast.embed_spec != self.index.spec:
                self._reply_error(session, reply, query_id, ERR_DIM_MISMATCH)
                return
            embedder = build_embedder(self.index.spec)
            query_vec = embedder.embed(broadcast.query_text)
            hits = search(self.index, query_vec, broadcast.top_k)
        except FedRagError:
            self._reply_error(session, reply, query_id, ERR_EMBEDDER)
            return
        except Exception:
            self._reply_error(session, reply, query_id, ERR_INTERNAL)
            return
        if self.elapsed_provider is not None:
            elapsed_ms = self.elapsed_provider()
        else:
            elapsed_ms = (time.perf_counter() - started) * 1000.0

        hit_objs = []
        for rank, hit in enumerate(hits):
            snippet = self.index.snippet(hit.doc_id)
            hit_objs.append(
                {
                    "doc_id": hit.doc_id,
                    "text": snippet.text,
                    "source": snippet.source,
                    "l2_score": hit.score,
                    "rank": rank,
                }
            )
        inner = {
            "query_id": query_id,
            "client_id": self.client_id,
            "hits": hit_objs,
            "elapsed_ms": elapsed_ms,
        }
        sealed_out = session.seal(wire.make_aad(wire.T_RESPONSE, query_id), wire.canonical_json(inner))
        reply(
            wire.encode_sealed_envelope(wire.T_RESPONSE, encode_payload(sealed_out)),
            delay_s=elapsed_ms / 1000.0 if self.elapsed_provider is not None else 0.0,
        )

    def _reply_error(
        self, session: SecureSession, reply: ReplyFn, query_id: str, code: str
    ) -> None:
        inner = {"query_id": query_id, "client_id": self.client_id, "error": code}
        sealed = session.seal(wire.make_aad(wire.T_RESPONSE, query_id), wire.canonical_json(inner))
        reply(wire.encode_sealed_envelope(wire.T_RESPONSE, encode_payload(sealed)))


@dataclass
class InferenceStack:
    """Everything handle_query needs to turn a fused context into an answer."""

    template: PromptTemplate = field(default_factory=PromptTemplate)
    backend: GeneratorBackend = field(default_factory=StubGenerator)
    provider: ProviderClient | None = None
    endpoint_client: SealedInferClient | None = None
    endpoint_session: SecureSession | None = None
    max_tokens: int = 256


class FederationServer:
    """Orchestrator: verifies silo attestation, broadcasts queries, fuses, generates."""

    def __init__(
        self,
        transport: ServerTransport,
        verifier: AttestationVerifier,
        identity: SigningIdentity,
        measurement: str,
        embed_spec: EmbedderSpec,
        config: FederationConfig,
        inference: InferenceStack | None = None,
        rng: RandomBytes = secrets.token_bytes,
    ) -> None:
        self.transport = transport
        self.verifier = verifier
        self.identity = identity
        self.measurement = measurement
        self.embed_spec = embed_spec
        self.config = config
        self.inference = inference or InferenceStack()
        self._rng = rng
        self._lock = threading.Lock()
        self._sessions: dict[str, tuple[SiloSession, SecureSession]] = {}

    # -- attestation handshakes ------------------------------------------------

    def handshake(self, client_id: str, timeout_s: float = 10.0) -> bool:
        """Run the challenge/evidence/confirmation exchange with one peer."""
        nonce = self.verifier.issue_challenge(client_id)
        self.transport.send(
            client_id,
            wire.encode_envelope(
                wire.T_ATTEST_REQUEST,
                {
                    "client_id": client_id,
                    "nonce": nonce.hex(),
                    "embed_spec": self.embed_spec.to_json_dict(),
                },
            ),
        )
        deadline = self.transport.now() + timeout_s
        evidence: AttestationEvidence | None = None
        while evidence is None:
            item = self.transport.recv(deadline)
            if item is None:
                logger.warning("handshake with %s timed out", client_id)
                return False
            src, body = item
            if src != client_id:
                logger.warning("handshake: ignoring frame from %s", src)
                continue
            try:
                msg_type, payload = wire.decode_envelope(body)
            except wire.MalformedFrameError:
                continue
            if msg_type == wire.T_HANDSHAKE_REFUSED:
                logger.warning("handshake refused by %s: %s", client_id, payload)
                return False
            if msg_type != wire.T_EVIDENCE or not isinstance(payload, dict):
                continue
            try:
                evidence = AttestationEvidence.from_json_dict(payload["evidence"])
            except (KeyError, ValueError, TypeError):
                logger.warning("handshake: malformed evidence from %s", client_id)
                return False

        try:
            result = self.verifier.verify_evidence(client_id, evidence)
        except FedRagError as exc:
            logger.warning("attestation rejected for %s: %s", client_id, type(exc).__name__)
            self.transport.send(
                client_id,
                wire.encode_envelope(
                    wire.T_SESSION_DENIED,
                    {"client_id": client_id, "code": type(exc).__name__},
                ),
            )
            return False

        session = result.session
        confirmation = sign_server_confirmation(
            self.identity,
            self.measurement,
            evidence.nonce,
            result.server_pub,
            evidence.client_pub,
            session.key_id,
        )
        self.transport.send(
            client_id,
            wire.encode_envelope(
                wire.T_SESSION_OK,
                {
                    "client_id": client_id,
                    "key_id": session.key_id,
                    "server_pub": result.server_pub.hex(),
                    "server_measurement": self.measurement,
                    "signature": confirmation.hex(),
                },
            ),
        )
        channel = SecureSession(session.key_id, session.session_key, send_epoch=EPOCH_VERIFIER)
        with self._lock:
            self._sessions[client_id] = (session, channel)
        return True

    def handshake_all(self, timeout_s: float = 10.0) -> list[str]:
        """Attest every configured client; returns ids that established sessions."""
        done = []
        for endpoint in self.config.clients:
            try:
                if self.handshake(endpoint.client_id, timeout_s):
                    done.append(endpoint.client_id)
            except FedRagError as exc:
                logger.warning("handshake error for %s: %s", endpoint.client_id, exc)
        return done

    def handshake_endpoint(self, endpoint_id: str, timeout_s: float = 10.0) -> bool:
        """Attest the confidential inference endpoint and bind its sealing session."""
        ok = self.handshake(endpoint_id, timeout_s)
        if ok:
            with self._lock:
                _, channel = self._sessions.pop(endpoint_id)
            self.inference.endpoint_session = channel
        return ok

    def live_sessions(self) -> dict[str, tuple[SiloSession, SecureSession]]:
        now = self.transport.now()
        with self._lock:
            return {
                cid: pair for cid, pair in self._sessions.items() if pair[0].is_live(now)
            }

    def drop_session(self, client_id: str) -> None:
        with self._lock:
            self._sessions.pop(client_id, None)

    # -- the query lifecycle ---------------------------------------------------

    def handle_query(
        self, question: BenchmarkQuestion | str, mode: str | None = None
    ) -> AnswerRecord:
        if isinstance(question, str):
            question = BenchmarkQuestion(qid="adhoc", question_text=question)
        mode = mode or self.config.inference_mode
        if mode not in INFERENCE_MODES:
            raise ValueError(f"unknown inference mode {mode!r}")

        started = self.transport.now()
        live = self.live_sessions()
        if len(live) < self.config.min_responders:
            raise InsufficientRespondersError(
                f"{len(live)} live sessions < min_responders {self.config.min_responders}"
            )

        query_id = self._rng(16).hex()
        broadcast = QueryBroadcast(
            query_id=query_id,
            query_text=question.question_text,
            top_k=self.config.top_k,
            deadline_ms=self.config.response_deadline_ms,
            embed_spec=self.embed_spec,
        )
        broadcast_bytes = wire.canonical_json(broadcast.to_json_dict())
        aad_query = wire.make_aad(wire.T_QUERY, query_id)
        for client_id, (_, channel) in live.items():
            sealed = channel.seal(aad_query, broadcast_bytes)
            self.transport.send(
                client_id, wire.encode_sealed_envelope(wire.T_QUERY, encode_payload(sealed))
            )

        hits_by_client, timing = self._collect(live, query_id, started)
        if len(hits_by_client) < self.config.min_responders:
            raise InsufficientRespondersError(
                f"{len(hits_by_client)} valid responses < min_responders "
                f"{self.config.min_responders}"
            )

        fused = fuse(hits_by_client, self.config.fusion_config(), query_id=query_id)
        response = self._generate(fused, question, mode)
        total_ms = (self.transport.now() - started) * 1000.0
        record = AnswerRecord(
            query_id=query_id,
            mode=mode,
            answer_text=response.text,
            backend_id=response.backend_id,
            degraded=response.degraded,
            fused_context=fused,
            per_client_timing=timing,
            responders=tuple(sorted(hits_by_client)),
            total_ms=total_ms,
        )
        logger.info(
            "%s",
            json.dumps(
                {
                    "query_id": query_id,
                    "responders": list(record.responders),
                    "fused_count": len(fused.documents),
                    "mode": mode,
                    "total_ms": total_ms,
                },
                sort_keys=True,
            ),
        )
        return record

    def _collect(
        self,
        live: dict[str, tuple[SiloSession, SecureSession]],
        query_id: str,
        started: float,
    ) -> tuple[dict[str, list[RetrievedHit]], dict[str, float]]:
        deadline = started + self.config.response_deadline_ms / 1000.0
        pending = set(live)
        hits_by_client: dict[str, list[RetrievedHit]] = {}
        timing: dict[str, float] = {}
        aad_response = wire.make_aad(wire.T_RESPONSE, query_id)

        while pending:
            item = self.transport.recv(deadline)
            if item is None:
                break
            src, body = item
            if src not in live:
                logger.warning("discarding response from unsessioned peer %s", src)
                continue
            try:
                msg_type, payload = wire.decode_envelope(body)
            except wire.MalformedFrameError:
                logger.warning("discarding malformed frame from %s", src)
                continue
            if msg_type != wire.T_RESPONSE:
                logger.warning("discarding frame type %r from %s mid-query", msg_type, src)
                continue
            _, channel = live[src]
            try:
                sealed = decode_payload(wire.decode_sealed_field(payload))
                plaintext = channel.open(sealed, aad_response)
                inner = json.loads(plaintext.decode("utf-8"))
                hits = self._validate_response(src, query_id, inner)
            except (AuthenticationFailure, wire.MalformedFrameError, ValueError) as exc:
                logger.warning("discarding bad response from %s: %s", src, exc)
                continue
            if src not in pending:
                logger.warning("late or duplicate logical response from %s discarded", src)
                continue
            pending.discard(src)
            if hits is None:
                continue  # sealed error response: counted as a non-responder
            hits_by_client[src] = hits
            timing[src] = float(inner["elapsed_ms"])
        return hits_by_client, timing

    def _validate_response(
        self, client_id: str, query_id: str, inner: dict
    ) -> list[RetrievedHit] | None:
        if inner.get("query_id") != query_id or inner.get("client_id") != client_id:
            raise ValueError("response does not match the outstanding query")
        if "error" in inner:
            logger.warning("silo %s reported error %s", client_id, inner["error"])
            return None
        raw_hits = inner["hits"]
        if not isinstance(raw_hits, list) or len(raw_hits) > self.config.top_k:
            raise ValueError("hit list malformed or oversized")
        hits: list[RetrievedHit] = []
        prev_score = -math.inf
        seen: set[str] = set()
        for rank, h in enumerate(raw_hits):
            score = float(h["l2_score"])
            if h["rank"] != rank:
                raise ValueError("hit ranks must be contiguous positions")
            if not math.isfinite(score) or score < 0.0 or score < prev_score:
                raise ValueError("hit scores must be finite, non-negative, ascending")
            if h["doc_id"] in seen:
                raise ValueError("duplicate doc_id within one response")
            if content_doc_id(h["text"]) != h["doc_id"]:
                raise ValueError("doc_id is not the content hash of the text")
            seen.add(h["doc_id"])
            prev_score = score
            hits.append(
                RetrievedHit(
                    doc_id=h["doc_id"],
                    text=h["text"],
                    source=h.get("source", ""),
                    l2_score=score,
                )
            )
        return hits

    def _generate(
        self, fused: FusedContext, question: BenchmarkQuestion, mode: str
    ) -> InferenceResponse:
        stack = self.inference
        clock = self.transport
        if mode == "standalone":
            prompt = build_prompt(stack.template, fused, question)
            return infer_standalone(
                InferenceRequest(prompt=prompt, max_tokens=stack.max_tokens),
                stack.backend,
                clock,
            )
        if mode == "cascading":
            return infer_cascading(
                stack.template,
                fused,
                question,
                stack.backend,
                stack.provider,
                max_tokens=stack.max_tokens,
                clock=clock,
            )
        if stack.endpoint_client is None:
            raise InsufficientRespondersError("no confidential endpoint configured")
        return infer_confidential(
            fused, question, stack.endpoint_session, stack.endpoint_client
        )


# -- TCP transport -------------------------------------------------------------


class TcpServerTransport(ServerTransport):
    """Persistent connections to each silo; reader threads feed one queue."""

    def __init__(self, endpoints: dict[str, tuple[str, int]], connect_timeout_s: float = 10.0):
        import queue

        self._queue: "queue.Queue[tuple[str, bytes]]" = queue.Queue()
        self._socks: dict[str, socket.socket] = {}
        self._send_locks: dict[str, threading.Lock] = {}
        self._threads: list[threading.Thread] = []
        for client_id, (host, port) in endpoints.items():
            sock = socket.create_connection((host, port), timeout=connect_timeout_s)
            sock.settimeout(None)
            self._socks[client_id] = sock
            self._send_locks[client_id] = threading.Lock()
            t = threading.Thread(target=self._reader, args=(client_id, sock), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, client_id: str, sock: socket.socket) -> None:
        try:
            while True:
                body = wire.recv_frame(sock)
                if body is None:
                    return
                self._queue.put((client_id, body))
        except (OSError, wire.MalformedFrameError):
            return

    def now(self) -> float:
        return time.monotonic()

    def send(self, dst: str, body: bytes) -> None:
        sock = self._socks.get(dst)
        if sock is None:
            logger.warning("no connection to %s; dropping frame", dst)
            return
        try:
            with self._send_locks[dst]:
                wire.send_frame(sock, body)
        except OSError:
            logger.warning("send to %s failed; peer will count as non-responder", dst)

    def recv(self, deadline: float) -> tuple[str, bytes] | None:
        import queue

        remaining = deadline - self.now()
        if remaining <= 0:
            return None
        try:
            return self._queue.get(timeout=remaining)
        except queue.Empty:
            return None

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass


class SiloTcpServer:
    """Listens for the orchestrator and feeds frames to a SiloNode."""

    def __init__(self, node: SiloNode, host: str = "127.0.0.1", port: int = 0) -> None:
        self.node = node
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        send_lock = threading.Lock()

        def reply(body: bytes, delay_s: float = 0.0) -> None:
            if delay_s > 0:
                time.sleep(delay_s)
            with send_lock:
                wire.send_frame(conn, body)

        try:
            while True:
                body = wire.recv_frame(conn)
                if body is None:
                    return
                self.node.on_frame(body, reply)
        except (OSError, wire.MalformedFrameError):
            return
        finally:
            conn.close()

    def stop(self) -> None:
        self._stop.set()
        self._listener.close()


def load_federation_config(path: str | Path) -> FederationConfig:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    clients = tuple(
        ClientEndpoint(client_id=c["client_id"], address=c.get("address", ""))
        for c in obj["clients"]
    )
    return FederationConfig(
        clients=clients,
        top_k=int(obj.get("top_k", 8)),
        k_rrf=int(obj.get("k_rrf", 60)),
        context_k=obj.get("context_k"),
        response_deadline_ms=int(obj.get("response_deadline_ms", 10_000)),
        min_responders=int(obj.get("min_responders", 1)),
        inference_mode=obj.get("inference_mode", "standalone"),
    )


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {address!r}; expected host:port")
    return host, int(port)


__all__ = [
    "AnswerRecord",
    "ClientEndpoint",
    "FederationConfig",
    "FederationServer",
    "InferenceStack",
    "QueryBroadcast",
    "ServerTransport",
    "SiloNode",
    "SiloTcpServer",
    "TcpServerTransport",
    "load_federation_config",
    "parse_address",
]
