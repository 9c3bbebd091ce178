"""Authenticated encryption of federation payloads under session keys.

One fixed AEAD suite (ChaCha20-Poly1305: 32-byte key, 12-byte nonce, 16-byte
tag), no negotiation. Nonces are 4-byte sender-epoch || 8-byte strictly
increasing counter; the two directions of a session use distinct epochs so
they never share nonce space under the one session key. Associated data
binds each payload to its message type and query id, so ciphertext cannot be
spliced across protocol contexts.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .errors import (
    AuthenticationFailure,
    NonceExhaustedError,
    PayloadTooLargeError,
)

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16
MAX_PLAINTEXT_LEN = 4 * 1024 * 1024

# Sender epochs: the attestation verifier (orchestrating server) vs the
# attested peer (silo or inference endpoint).
EPOCH_VERIFIER = 0
EPOCH_ATTESTED = 1

_MAX_COUNTER = 2**64 - 1


@dataclass(frozen=True)
class EncryptedPayload:
    key_id: str
    nonce: bytes
    aad: bytes
    ciphertext: bytes
    tag: bytes

    @property
    def epoch(self) -> int:
        return struct.unpack(">I", self.nonce[:4])[0]

    @property
    def counter(self) -> int:
        return struct.unpack(">Q", self.nonce[4:])[0]


def make_nonce(epoch: int, counter: int) -> bytes:
    return struct.pack(">I", epoch) + struct.pack(">Q", counter)


def seal_raw(
    key: bytes,
    key_id: str,
    nonce: bytes,
    aad: bytes,
    plaintext: bytes,
    max_plaintext: int = MAX_PLAINTEXT_LEN,
) -> EncryptedPayload:
    """Seal with an explicit nonce; callers must guarantee (key, nonce) freshness."""
    if len(key) != KEY_LEN:
        raise ValueError(f"session key must be {KEY_LEN} bytes")
    if len(nonce) != NONCE_LEN:
        raise ValueError(f"nonce must be {NONCE_LEN} bytes")
    if len(plaintext) > max_plaintext:
        raise PayloadTooLargeError(f"plaintext of {len(plaintext)} bytes exceeds {max_plaintext}")
    ct_and_tag = ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)
    return EncryptedPayload(
        key_id=key_id,
        nonce=nonce,
        aad=aad,
        ciphertext=ct_and_tag[:-TAG_LEN],
        tag=ct_and_tag[-TAG_LEN:],
    )


def open_raw(key: bytes, payload: EncryptedPayload) -> bytes:
    """Return the plaintext iff the tag verifies; one opaque error otherwise."""
    if len(key) != KEY_LEN:
        raise ValueError(f"session key must be {KEY_LEN} bytes")
    try:
        return ChaCha20Poly1305(key).decrypt(
            payload.nonce, payload.ciphertext + payload.tag, payload.aad
        )
    except InvalidTag as exc:
        raise AuthenticationFailure("payload failed integrity check") from exc


def encode_payload(payload: EncryptedPayload) -> bytes:
    """Wire encoding: u16 key_id len + key_id, nonce, u32 aad len + aad,
    u32 ciphertext len + ciphertext, tag."""
    key_id = payload.key_id.encode("utf-8")
    if len(key_id) > 0xFFFF:
        raise ValueError("key_id too long for wire encoding")
    return b"".join(
        [
            struct.pack(">H", len(key_id)),
            key_id,
            payload.nonce,
            struct.pack(">I", len(payload.aad)),
            payload.aad,
            struct.pack(">I", len(payload.ciphertext)),
            payload.ciphertext,
            payload.tag,
        ]
    )


def decode_payload(data: bytes) -> EncryptedPayload:
    try:
        off = 0
        (key_id_len,) = struct.unpack_from(">H", data, off)
        off += 2
        key_id = data[off : off + key_id_len].decode("utf-8")
        if len(data[off : off + key_id_len]) != key_id_len:
            raise ValueError("truncated key_id")
        off += key_id_len
        nonce = data[off : off + NONCE_LEN]
        if len(nonce) != NONCE_LEN:
            raise ValueError("truncated nonce")
        off += NONCE_LEN
        (aad_len,) = struct.unpack_from(">I", data, off)
        off += 4
        aad = data[off : off + aad_len]
        if len(aad) != aad_len:
            raise ValueError("truncated aad")
        off += aad_len
        (ct_len,) = struct.unpack_from(">I", data, off)
        off += 4
        ciphertext = data[off : off + ct_len]
        if len(ciphertext) != ct_len:
            raise ValueError("truncated ciphertext")
        off += ct_len
        tag = data[off : off + TAG_LEN]
        if len(tag) != TAG_LEN or off + TAG_LEN != len(data):
            raise ValueError("bad tag length or trailing bytes")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise AuthenticationFailure("malformed sealed payload") from exc
    return EncryptedPayload(key_id=key_id, nonce=nonce, aad=aad, ciphertext=ciphertext, tag=tag)


class SecureSession:
    """Bidirectional sealing context over one attested session key.

    Each side constructs it with its own sender epoch; outbound counters are
    atomically incremented and inbound counters are checked against a
    per-epoch high-water mark, so duplicated or replayed payloads fail.
    """

    def __init__(
        self,
        key_id: str,
        key: bytes,
        send_epoch: int,
        max_plaintext: int = MAX_PLAINTEXT_LEN,
    ) -> None:
        if len(key) != KEY_LEN:
            raise ValueError(f"session key must be {KEY_LEN} bytes")
        self.key_id = key_id
        self._key = key
        self._send_epoch = send_epoch
        self._max_plaintext = max_plaintext
        self._counter = 0
        self._high_water: dict[int, int] = {}
        self._lock = threading.Lock()

    def seal(self, aad: bytes, plaintext: bytes) -> EncryptedPayload:
        with self._lock:
            if self._counter >= _MAX_COUNTER:
                raise NonceExhaustedError("nonce counter wrapped; close the session")
            self._counter += 1
            counter = self._counter
        nonce = make_nonce(self._send_epoch, counter)
        return seal_raw(self._key, self.key_id, nonce, aad, plaintext, self._max_plaintext)

    def open(self, payload: EncryptedPayload, expected_aad: bytes) -> bytes:
        """Open an inbound payload, enforcing aad binding and counter freshness."""
        if payload.key_id != self.key_id:
            raise AuthenticationFailure("payload failed integrity check")
        if payload.aad != expected_aad:
            raise AuthenticationFailure("payload failed integrity check")
        epoch = payload.epoch
        if epoch == self._send_epoch:
            raise AuthenticationFailure("payload failed integrity check")
        counter = payload.counter
        with self._lock:
            if counter <= self._high_water.get(epoch, 0):
                raise AuthenticationFailure("payload failed integrity check")
        plaintext = open_raw(self._key, payload)
        with self._lock:
            if counter <= self._high_water.get(epoch, 0):
                raise AuthenticationFailure("payload failed integrity check")
            self._high_water[epoch] = counter
        return plaintext

    def __repr__(self) -> str:  # key bytes stay out of logs
        return f"SecureSession(key_id={self.key_id!r}, send_epoch={self._send_epoch})"
