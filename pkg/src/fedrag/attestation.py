"""Simulated remote attestation gating federation membership.

Real TEE quotes are out of scope; evidence here is an Ed25519 signature by a
registered identity key over (measurement || challenge nonce || ephemeral
key-agreement public key). Verification against an authorization policy
yields a session key derived via X25519 + HKDF, which every later document
payload is sealed under. The protocol-level semantics (membership gated by
verified identity and measurement, sessions bound to fresh challenges) match
what a hardware attestation flow would provide.
"""

from __future__ import annotations

import hashlib
import json
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .clock import Clock, SystemClock
from .errors import (
    BadSignatureError,
    MeasurementDeniedError,
    ReplayDetectedError,
    UnknownClientError,
    UnknownIdentityError,
)

SESSION_KDF_CONTEXT = b"fedrag/v1/session"
NONCE_LEN = 16
DEFAULT_NONCE_TTL_SECS = 30.0
DEFAULT_SESSION_TTL_SECS = 3600.0

RandomBytes = Callable[[int], bytes]


def canonical_json_bytes(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def measure_manifest(manifest: dict) -> str:
    """Measurement of a node's code/config identity: SHA-256 over canonical JSON."""
    return hashlib.sha256(canonical_json_bytes(manifest)).hexdigest()


def _check_measurement(value: str) -> str:
    raw = bytes.fromhex(value)
    if len(raw) != 32:
        raise ValueError("measurement must be a 32-byte hex digest")
    return value


def _raw_public(key: Ed25519PublicKey | X25519PublicKey) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


@dataclass(frozen=True)
class SigningIdentity:
    """A node's long-lived identity signing key (Ed25519)."""

    key_id: str
    private_key: Ed25519PrivateKey

    @classmethod
    def generate(cls, key_id: str, rng: RandomBytes = secrets.token_bytes) -> "SigningIdentity":
        return cls(key_id, Ed25519PrivateKey.from_private_bytes(rng(32)))

    @classmethod
    def from_private_hex(cls, key_id: str, private_hex: str) -> "SigningIdentity":
        return cls(key_id, Ed25519PrivateKey.from_private_bytes(bytes.fromhex(private_hex)))

    def public_bytes(self) -> bytes:
        return _raw_public(self.private_key.public_key())

    def __repr__(self) -> str:  # never leak key material into logs
        return f"SigningIdentity(key_id={self.key_id!r})"


@dataclass(frozen=True)
class AttestationEvidence:
    measurement: str
    nonce: bytes
    client_pub: bytes
    signature: bytes
    identity_key_id: str

    def signed_message(self) -> bytes:
        return bytes.fromhex(self.measurement) + self.nonce + self.client_pub

    def to_json_dict(self) -> dict:
        return {
            "measurement": self.measurement,
            "nonce": self.nonce.hex(),
            "client_pub": self.client_pub.hex(),
            "signature": self.signature.hex(),
            "identity_key_id": self.identity_key_id,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "AttestationEvidence":
        return cls(
            measurement=_check_measurement(obj["measurement"]),
            nonce=bytes.fromhex(obj["nonce"]),
            client_pub=bytes.fromhex(obj["client_pub"]),
            signature=bytes.fromhex(obj["signature"]),
            identity_key_id=obj["identity_key_id"],
        )


@dataclass
class AuthorizationPolicy:
    """Who may join: allowed measurements plus registered identity keys."""

    allowed_measurements: set[str]
    registered_identities: dict[str, bytes]
    nonce_ttl_secs: float = DEFAULT_NONCE_TTL_SECS
    session_ttl_secs: float = DEFAULT_SESSION_TTL_SECS

    @classmethod
    def from_json_dict(cls, obj: dict) -> "AuthorizationPolicy":
        return cls(
            allowed_measurements={_check_measurement(m) for m in obj["allowed_measurements"]},
            registered_identities={
                key_id: bytes.fromhex(pub_hex) for key_id, pub_hex in obj["identities"].items()
            },
            nonce_ttl_secs=float(obj.get("nonce_ttl_secs", DEFAULT_NONCE_TTL_SECS)),
            session_ttl_secs=float(obj.get("session_ttl_secs", DEFAULT_SESSION_TTL_SECS)),
        )

    def to_json_dict(self) -> dict:
        return {
            "allowed_measurements": sorted(self.allowed_measurements),
            "identities": {k: v.hex() for k, v in sorted(self.registered_identities.items())},
            "nonce_ttl_secs": self.nonce_ttl_secs,
            "session_ttl_secs": self.session_ttl_secs,
        }

    @classmethod
    def load(cls, path: str | Path) -> "AuthorizationPolicy":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SiloSession:
    client_id: str
    key_id: str
    session_key: bytes
    established_at: float
    expires_at: float
    measurement: str

    def is_live(self, now: float) -> bool:
        return now < self.expires_at

    def __repr__(self) -> str:  # session_key must never appear in logs
        return (
            f"SiloSession(client_id={self.client_id!r}, key_id={self.key_id!r}, "
            f"established_at={self.established_at}, expires_at={self.expires_at})"
        )


def derive_session_key(
    own_private: X25519PrivateKey,
    peer_public: bytes,
    client_pub: bytes,
    server_pub: bytes,
) -> bytes:
    """Both sides run this over the X25519 shared secret and get identical bytes."""
    shared = own_private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    return HKDF(
        algorithm=SHA256(),
        length=32,
        salt=None,
        info=SESSION_KDF_CONTEXT + client_pub + server_pub,
    ).derive(shared)


def _confirmation_message(
    server_measurement: str, nonce: bytes, server_pub: bytes, client_pub: bytes, key_id: str
) -> bytes:
    return (
        bytes.fromhex(server_measurement) + nonce + server_pub + client_pub + key_id.encode()
    )


def sign_server_confirmation(
    identity: SigningIdentity,
    server_measurement: str,
    nonce: bytes,
    server_pub: bytes,
    client_pub: bytes,
    key_id: str,
) -> bytes:
    msg = _confirmation_message(server_measurement, nonce, server_pub, client_pub, key_id)
    return identity.private_key.sign(msg)


def verify_server_confirmation(
    pinned_server_pub: bytes,
    expected_measurement: str,
    server_measurement: str,
    nonce: bytes,
    server_pub: bytes,
    client_pub: bytes,
    key_id: str,
    signature: bytes,
) -> None:
    """Client-side check of the server's identity and measurement; raises on failure."""
    if server_measurement != expected_measurement:
        raise MeasurementDeniedError("server measurement does not match the pinned value")
    msg = _confirmation_message(server_measurement, nonce, server_pub, client_pub, key_id)
    try:
        Ed25519PublicKey.from_public_bytes(pinned_server_pub).verify(signature, msg)
    except InvalidSignature as exc:
        raise BadSignatureError("server confirmation signature invalid") from exc


class ClientAttester:
    """Client-side handshake state: computes its measurement and signs evidence."""

    def __init__(
        self,
        identity: SigningIdentity,
        manifest: dict,
        rng: RandomBytes = secrets.token_bytes,
    ) -> None:
        self.identity = identity
        self.manifest = manifest
        self.measurement = measure_manifest(manifest)
        self._rng = rng
        self._ephemeral: X25519PrivateKey | None = None

    def produce_evidence(self, nonce: bytes) -> AttestationEvidence:
        if len(nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes")
        self._ephemeral = X25519PrivateKey.from_private_bytes(self._rng(32))
        client_pub = _raw_public(self._ephemeral.public_key())
        message = bytes.fromhex(self.measurement) + nonce + client_pub
        return AttestationEvidence(
            measurement=self.measurement,
            nonce=nonce,
            client_pub=client_pub,
            signature=self.identity.private_key.sign(message),
            identity_key_id=self.identity.key_id,
        )

    def derive_session_key(self, server_pub: bytes) -> bytes:
        if self._ephemeral is None:
            raise ReplayDetectedError("no handshake in progress")
        ephemeral, self._ephemeral = self._ephemeral, None
        client_pub = _raw_public(ephemeral.public_key())
        return derive_session_key(ephemeral, server_pub, client_pub, server_pub)


@dataclass(frozen=True)
class VerificationResult:
    session: SiloSession
    server_pub: bytes


class AttestationVerifier:
    """Server-side challenge bookkeeping and evidence verification.

    Policy is shared read-mostly state swapped atomically; challenge state is
    a map keyed by client_id, at most one outstanding challenge each, single
    use (consumed by the first verification attempt, successful or not).
    """

    def __init__(
        self,
        policy: AuthorizationPolicy,
        clock: Clock | None = None,
        rng: RandomBytes = secrets.token_bytes,
    ) -> None:
        self._policy = policy
        self._clock = clock or SystemClock()
        self._rng = rng
        self._lock = threading.Lock()
        self._challenges: dict[str, tuple[bytes, float]] = {}
        self._session_seq = 0

    @property
    def policy(self) -> AuthorizationPolicy:
        with self._lock:
            return self._policy

    def set_policy(self, policy: AuthorizationPolicy) -> None:
        with self._lock:
            self._policy = policy

    def issue_challenge(self, client_id: str) -> bytes:
        with self._lock:
            if client_id not in self._policy.registered_identities:
                raise UnknownClientError(f"client {client_id!r} is not registered")
            nonce = self._rng(NONCE_LEN)
            self._challenges[client_id] = (nonce, self._clock.now() + self._policy.nonce_ttl_secs)
            return nonce

    def verify_evidence(self, client_id: str, evidence: AttestationEvidence) -> VerificationResult:
        """Verify evidence against the policy and the outstanding challenge.

        On success, derives the shared session key from a fresh server-side
        ephemeral key and returns it with the server public key the client
        needs to derive the same key.
        """
        with self._lock:
            policy = self._policy
            challenge = self._challenges.pop(client_id, None)
            now = self._clock.now()

        if challenge is None:
            raise ReplayDetectedError(f"no outstanding challenge for {client_id!r}")
        nonce, expires_at = challenge
        if now >= expires_at:
            raise ReplayDetectedError(f"challenge for {client_id!r} expired")
        if evidence.nonce != nonce:
            raise ReplayDetectedError(f"nonce mismatch for {client_id!r}")

        if evidence.identity_key_id != client_id:
            raise UnknownIdentityError(
                f"evidence identity {evidence.identity_key_id!r} does not match {client_id!r}"
            )
        identity_pub = policy.registered_identities.get(evidence.identity_key_id)
        if identity_pub is None:
            raise UnknownIdentityError(f"identity {evidence.identity_key_id!r} not registered")

        try:
            Ed25519PublicKey.from_public_bytes(identity_pub).verify(
                evidence.signature, evidence.signed_message()
            )
        except InvalidSignature as exc:
            raise BadSignatureError(f"evidence signature invalid for {client_id!r}") from exc

        if evidence.measurement not in policy.allowed_measurements:
            raise MeasurementDeniedError(f"measurement denied for {client_id!r}")

        server_ephemeral = X25519PrivateKey.from_private_bytes(self._rng(32))
        server_pub = _raw_public(server_ephemeral.public_key())
        session_key = derive_session_key(
            server_ephemeral, evidence.client_pub, evidence.client_pub, server_pub
        )
        with self._lock:
            self._session_seq += 1
            seq = self._session_seq
        session = SiloSession(
            client_id=client_id,
            key_id=f"sess-{client_id}-{seq}",
            session_key=session_key,
            established_at=now,
            expires_at=now + policy.session_ttl_secs,
            measurement=evidence.measurement,
        )
        return VerificationResult(session=session, server_pub=server_pub)
