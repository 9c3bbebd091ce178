"""Deterministic in-process federation assembly for tests.

Builds N silo nodes, the orchestrating server, a mock confidential endpoint,
and a mock third-party provider on a discrete-event network with a virtual
clock. One seed fully determines nonces, ephemeral keys, query ids, virtual
retrieval times, and fault draws, so two runs with the same seed produce
byte-identical frame logs. Every frame that crosses the simulated wire is
recorded for confidentiality scans.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import wire
from .attestation import (
    AttestationVerifier,
    AuthorizationPolicy,
    ClientAttester,
    SigningIdentity,
    measure_manifest,
)
from .clock import VirtualClock
from .embedding import EmbedderSpec
from .errors import BackendUnavailableError, EndpointUnreachableError, FedRagError
from .index import DocumentSnippet, build_index
from .inference import (
    InferenceRequest,
    PromptTemplate,
    StubGenerator,
    serve_sealed_inference,
)
from .protocol import (
    AttestedResponder,
    ClientEndpoint,
    FederationConfig,
    FederationServer,
    InferenceStack,
    ServerTransport,
    SiloNode,
)

FAULT_KINDS = ("drop", "delay", "duplicate", "tamper")

SERVER_ID = "server"
ENDPOINT_ID = "endpoint"
PROVIDER_ID = "provider"


@dataclass(frozen=True)
class FaultRule:
    """Applies to frames whose sender or receiver equals target ('*' = any)."""

    target: str
    kind: str
    probability: float | None = None
    schedule: tuple[int, ...] | None = None  # 0-based indices among matching frames
    delay_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.probability is None and self.schedule is None:
            raise ValueError("fault rule needs a probability or a schedule")

    def matches(self, src: str, dst: str) -> bool:
        return self.target in ("*", src, dst)

    def fires(self, occurrence: int, rng: random.Random) -> bool:
        if self.schedule is not None:
            return occurrence in self.schedule
        return rng.random() < (self.probability or 0.0)


@dataclass(frozen=True)
class FrameRecord:
    t: float
    src: str
    dst: str
    body: bytes
    fault: str = ""


class SimNetwork:
    """Discrete-event message fabric with seeded fault injection."""

    def __init__(self, rng: random.Random, clock: VirtualClock) -> None:
        self.rng = rng
        self.clock = clock
        self.faults: list[FaultRule] = []
        self.frames: list[FrameRecord] = []
        self._heap: list[tuple[float, int, str, str, bytes]] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[str, bytes], None]] = {}
        self._inboxes: dict[str, deque[tuple[str, bytes]]] = {}
        self._fault_counts: dict[int, int] = {}

    def register_active(self, node_id: str) -> None:
        self._inboxes[node_id] = deque()

    def register_handler(self, node_id: str, handler: Callable[[str, bytes], None]) -> None:
        self._handlers[node_id] = handler

    def _flip_one_bit(self, body: bytes) -> bytes:
        bit = self.rng.randrange(len(body) * 8)
        out = bytearray(body)
        out[bit // 8] ^= 1 << (bit % 8)
        return bytes(out)

    def send(self, src: str, dst: str, body: bytes, delay_s: float = 0.0) -> None:
        t = self.clock.now() + delay_s
        delivered = body
        dropped = False
        applied: list[str] = []
        duplicates = 1
        for idx, rule in enumerate(self.faults):
            if not rule.matches(src, dst):
                continue
            occurrence = self._fault_counts.get(idx, 0)
            self._fault_counts[idx] = occurrence + 1
            if not rule.fires(occurrence, self.rng):
                continue
            applied.append(rule.kind)
            if rule.kind == "drop":
                dropped = True
            elif rule.kind == "delay":
                t += rule.delay_ms / 1000.0
            elif rule.kind == "duplicate":
                duplicates += 1
            elif rule.kind == "tamper":
                delivered = self._flip_one_bit(delivered)
        fault_tag = "+".join(applied)
        if dropped:
            self.frames.append(FrameRecord(t, src, dst, body, fault_tag))
            return
        for copy in range(duplicates):
            self.frames.append(FrameRecord(t, src, dst, delivered, fault_tag))
            heapq.heappush(self._heap, (t, self._seq, src, dst, delivered))
            self._seq += 1

    def _deliver_next(self) -> None:
        t, _, src, dst, body = heapq.heappop(self._heap)
        self.clock.advance_to(t)
        inbox = self._inboxes.get(dst)
        if inbox is not None:
            inbox.append((src, body))
            return
        handler = self._handlers.get(dst)
        if handler is not None:
            handler(src, body)

    def pump_until_frame(self, node_id: str, deadline: float) -> tuple[str, bytes] | None:
        """Advance virtual time, delivering events, until node_id has a frame."""
        inbox = self._inboxes[node_id]
        while True:
            if inbox:
                return inbox.popleft()
            if not self._heap or self._heap[0][0] > deadline:
                self.clock.advance_to(deadline)
                return None
            self._deliver_next()

    def request(self, src: str, dst: str, body: bytes, timeout_s: float) -> bytes | None:
        """Send and pump until a frame from dst lands; other inbound frames stay queued."""
        self.send(src, dst, body)
        deadline = self.clock.now() + timeout_s
        inbox = self._inboxes[src]
        while True:
            for i, (s, b) in enumerate(inbox):
                if s == dst:
                    del inbox[i]
                    return b
            if not self._heap or self._heap[0][0] > deadline:
                self.clock.advance_to(deadline)
                return None
            self._deliver_next()


class SimServerTransport(ServerTransport):
    def __init__(self, network: SimNetwork, node_id: str = SERVER_ID) -> None:
        self.network = network
        self.node_id = node_id
        network.register_active(node_id)

    def now(self) -> float:
        return self.network.clock.now()

    def send(self, dst: str, body: bytes) -> None:
        self.network.send(self.node_id, dst, body)

    def recv(self, deadline: float) -> tuple[str, bytes] | None:
        return self.network.pump_until_frame(self.node_id, deadline)


class SimProviderClient:
    """Routes provider calls over the simulated network so frames get logged."""

    def __init__(self, network: SimNetwork, timeout_s: float = 5.0) -> None:
        self.network = network
        self.timeout_s = timeout_s
        self.provider_id = PROVIDER_ID

    def generate(self, prompt: str, max_tokens: int) -> str:
        body = wire.encode_envelope(
            wire.T_PROVIDER_GENERATE, {"prompt": prompt, "max_tokens": max_tokens}
        )
        resp = self.network.request(SERVER_ID, PROVIDER_ID, body, self.timeout_s)
        if resp is None:
            raise BackendUnavailableError("provider did not answer in time")
        msg_type, payload = wire.decode_envelope(resp)
        if msg_type != wire.T_PROVIDER_RESULT or not isinstance(payload, dict):
            raise BackendUnavailableError("provider returned a malformed frame")
        return str(payload["text"])


class SimSealedInferClient:
    def __init__(self, network: SimNetwork, timeout_s: float = 5.0) -> None:
        self.network = network
        self.timeout_s = timeout_s

    def exchange(self, sealed_wire: bytes) -> bytes:
        body = wire.encode_sealed_envelope(wire.T_SEALED_INFER, sealed_wire)
        resp = self.network.request(SERVER_ID, ENDPOINT_ID, body, self.timeout_s)
        if resp is None:
            raise EndpointUnreachableError("endpoint did not answer in time")
        msg_type, payload = wire.decode_envelope(resp)
        if msg_type != wire.T_SEALED_INFER_RESULT:
            raise EndpointUnreachableError("endpoint returned a malformed frame")
        return wire.decode_sealed_field(payload)


class EndpointNode:
    """Mock confidential inference endpoint: attests, opens sealed requests,
    runs the stub generator, seals results back."""

    def __init__(
        self,
        network: SimNetwork,
        attester: ClientAttester,
        pinned_server_pub: bytes,
        pinned_server_measurement: str,
        template: PromptTemplate,
        clock: VirtualClock,
    ) -> None:
        self.network = network
        self.template = template
        self.clock = clock
        self.backend = StubGenerator(template)
        self.responder = AttestedResponder(
            ENDPOINT_ID, attester, pinned_server_pub, pinned_server_measurement
        )

    def handle(self, src: str, body: bytes) -> None:
        try:
            msg_type, payload = wire.decode_envelope(body)
        except wire.MalformedFrameError:
            return
        reply = lambda b, delay_s=0.0: self.network.send(ENDPOINT_ID, src, b, delay_s)
        if msg_type == wire.T_ATTEST_REQUEST:
            self.responder.handle_attest_request(payload, reply)
        elif msg_type == wire.T_SESSION_OK:
            self.responder.handle_session_ok(payload)
        elif msg_type == wire.T_SEALED_INFER:
            session = self.responder.session
            if session is None:
                return
            try:
                sealed_wire = wire.decode_sealed_field(payload)
                result = serve_sealed_inference(
                    session, sealed_wire, self.backend, self.template, self.clock
                )
            except FedRagError:
                return  # tampered or replayed request: no answer, no oracle
            reply(wire.encode_sealed_envelope(wire.T_SEALED_INFER_RESULT, result))


class ProviderNode:
    """Mock third-party provider: runs the stub on whatever prompt it is sent.

    With no document section in the question-only prompt every option scores
    zero, so it deterministically answers the first label.
    """

    def __init__(self, network: SimNetwork, template: PromptTemplate) -> None:
        self.network = network
        self.generator = StubGenerator(template)

    def handle(self, src: str, body: bytes) -> None:
        try:
            msg_type, payload = wire.decode_envelope(body)
        except wire.MalformedFrameError:
            return
        if msg_type != wire.T_PROVIDER_GENERATE or not isinstance(payload, dict):
            return
        text = self.generator.generate(
            InferenceRequest(
                prompt=str(payload.get("prompt", "")),
                max_tokens=int(payload.get("max_tokens", 256)),
            )
        )
        self.network.send(
            PROVIDER_ID, src, wire.encode_envelope(wire.T_PROVIDER_RESULT, {"text": text})
        )


@dataclass(frozen=True)
class SimConfig:
    corpora: tuple[str, ...]
    n_clients: int = 4
    seed: int = 0
    faults: tuple[FaultRule, ...] = ()
    denied_clients: tuple[int, ...] = ()
    top_k: int = 8
    k_rrf: int = 60
    context_k: int | None = None
    response_deadline_ms: int = 10_000
    min_responders: int = 1
    inference_mode: str = "standalone"
    embed_dim: int = 256
    with_endpoint: bool = True
    with_provider: bool = True

    def __post_init__(self) -> None:
        if len(self.corpora) != self.n_clients:
            raise ValueError("need exactly one corpus path per client")

    @classmethod
    def from_json_dict(cls, obj: dict, base_dir: Path | None = None) -> "SimConfig":
        corpora = obj["corpora"]
        if base_dir is not None:
            corpora = [str((base_dir / c) if not Path(c).is_absolute() else Path(c)) for c in corpora]
        faults = tuple(
            FaultRule(
                target=f["target"],
                kind=f["kind"],
                probability=f.get("probability"),
                schedule=tuple(f["schedule"]) if "schedule" in f else None,
                delay_ms=float(f.get("delay_ms", 0.0)),
            )
            for f in obj.get("faults", [])
        )
        return cls(
            corpora=tuple(corpora),
            n_clients=int(obj.get("n_clients", 4)),
            seed=int(obj.get("seed", 0)),
            faults=faults,
            denied_clients=tuple(obj.get("denied_clients", [])),
            top_k=int(obj.get("top_k", 8)),
            k_rrf=int(obj.get("k_rrf", 60)),
            context_k=obj.get("context_k"),
            response_deadline_ms=int(obj.get("response_deadline_ms", 10_000)),
            min_responders=int(obj.get("min_responders", 1)),
            inference_mode=obj.get("inference_mode", "standalone"),
            embed_dim=int(obj.get("embed_dim", 256)),
        )


def read_snippet_file(path: str | Path) -> list[DocumentSnippet]:
    """Strict snippet JSONL reader for fixtures; ingest has the tolerant path."""
    snippets = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            snippets.append(
                DocumentSnippet(
                    text=obj["text"], source=obj.get("source", ""), meta=obj.get("meta", {})
                )
            )
    return snippets


@dataclass
class SimFederation:
    """Handle over a fully handshaken simulated federation."""

    server: FederationServer
    network: SimNetwork
    clock: VirtualClock
    config: SimConfig
    silos: dict[str, SiloNode]
    live_clients: list[str]
    denied: list[str]
    verifier: AttestationVerifier
    snippet_texts: list[str] = field(default_factory=list)

    def handle_query(self, question, mode: str | None = None):
        return self.server.handle_query(question, mode)

    def inject_frame(self, src: str, dst: str, body: bytes, delay_s: float = 0.0) -> None:
        self.network.send(src, dst, body, delay_s)

    @property
    def frames(self) -> list[FrameRecord]:
        return self.network.frames


def client_name(i: int) -> str:
    return f"client-{i}"


def build_sim(cfg: SimConfig) -> SimFederation:
    rng = random.Random(cfg.seed)
    rng_bytes = rng.randbytes
    clock = VirtualClock()
    network = SimNetwork(rng, clock)
    network.faults = list(cfg.faults)

    template = PromptTemplate()
    embed_spec = EmbedderSpec(kind="feature_hash", dim=cfg.embed_dim, normalize=True)

    server_identity = SigningIdentity.generate("server-identity", rng_bytes)
    server_manifest = {"role": "orchestrator", "build": "sim"}
    server_measurement = measure_manifest(server_manifest)
    server_pub = server_identity.public_bytes()

    allowed: set[str] = set()
    identities: dict[str, bytes] = {}
    silos: dict[str, SiloNode] = {}
    snippet_texts: list[str] = []
    denied_names: list[str] = []

    for i in range(cfg.n_clients):
        cid = client_name(i)
        identity = SigningIdentity.generate(cid, rng_bytes)
        identities[cid] = identity.public_bytes()
        denied = i in cfg.denied_clients
        manifest = {
            "role": "silo",
            "client_id": cid,
            "build": "tampered" if denied else "release",
        }
        if denied:
            denied_names.append(cid)
        else:
            allowed.add(measure_manifest(manifest))
        snippets = read_snippet_file(cfg.corpora[i])
        snippet_texts.extend(s.text for s in snippets)
        index = build_index(snippets, embed_spec)
        node = SiloNode(
            client_id=cid,
            attester=ClientAttester(identity, manifest, rng_bytes),
            index=index,
            pinned_server_pub=server_pub,
            pinned_server_measurement=server_measurement,
            clock=clock,
            elapsed_provider=lambda: float(rng.randint(1, 5)),
        )
        silos[cid] = node

        def make_handler(n: SiloNode, node_id: str):
            def handler(src: str, body: bytes) -> None:
                n.on_frame(
                    body,
                    lambda b, delay_s=0.0: network.send(node_id, src, b, delay_s),
                )

            return handler

        network.register_handler(cid, make_handler(node, cid))

    endpoint_identity = SigningIdentity.generate(ENDPOINT_ID, rng_bytes)
    endpoint_manifest = {"role": "confidential-endpoint", "build": "release"}
    identities[ENDPOINT_ID] = endpoint_identity.public_bytes()
    allowed.add(measure_manifest(endpoint_manifest))
    endpoint = EndpointNode(
        network,
        ClientAttester(endpoint_identity, endpoint_manifest, rng_bytes),
        server_pub,
        server_measurement,
        template,
        clock,
    )
    network.register_handler(ENDPOINT_ID, endpoint.handle)

    provider = ProviderNode(network, template)
    network.register_handler(PROVIDER_ID, provider.handle)

    policy = AuthorizationPolicy(allowed_measurements=allowed, registered_identities=identities)
    verifier = AttestationVerifier(policy, clock, rng_bytes)
    transport = SimServerTransport(network)

    fed_config = FederationConfig(
        clients=tuple(ClientEndpoint(client_name(i)) for i in range(cfg.n_clients)),
        top_k=cfg.top_k,
        k_rrf=cfg.k_rrf,
        context_k=cfg.context_k,
        response_deadline_ms=cfg.response_deadline_ms,
        min_responders=cfg.min_responders,
        inference_mode=cfg.inference_mode,
    )
    stack = InferenceStack(
        template=template,
        backend=StubGenerator(template),
        provider=SimProviderClient(network) if cfg.with_provider else None,
        endpoint_client=SimSealedInferClient(network) if cfg.with_endpoint else None,
    )
    server = FederationServer(
        transport=transport,
        verifier=verifier,
        identity=server_identity,
        measurement=server_measurement,
        embed_spec=embed_spec,
        config=fed_config,
        inference=stack,
        rng=rng_bytes,
    )

    live = server.handshake_all(timeout_s=5.0)
    if cfg.with_endpoint:
        server.handshake_endpoint(ENDPOINT_ID, timeout_s=5.0)

    return SimFederation(
        server=server,
        network=network,
        clock=clock,
        config=cfg,
        silos=silos,
        live_clients=live,
        denied=denied_names,
        verifier=verifier,
        snippet_texts=snippet_texts,
    )
