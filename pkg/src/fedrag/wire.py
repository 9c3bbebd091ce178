"""Frame and envelope encoding shared by the in-process and TCP transports.

Every frame body is a canonical-JSON envelope ``{"type": ..., "payload": ...}``.
Handshake types carry plaintext-but-signed JSON payloads; document-bearing
types carry the base64 of an EncryptedPayload wire encoding. On TCP, frames
are length-prefixed with a 4-byte big-endian size.
"""

from __future__ import annotations

import base64
import json
import socket
import struct

from .errors import FedRagError

FRAME_HEADER_LEN = 4
MAX_FRAME_LEN = 8 * 1024 * 1024

# Handshake (plaintext-but-signed) message types.
T_ATTEST_REQUEST = "attest_request"
T_EVIDENCE = "evidence"
T_SESSION_OK = "session_ok"
T_SESSION_DENIED = "session_denied"
T_HANDSHAKE_REFUSED = "handshake_refused"

# Sealed message types.
T_QUERY = "query"
T_RESPONSE = "response"
T_SEALED_INFER = "sealed_infer"
T_SEALED_INFER_RESULT = "sealed_infer_result"

# Third-party provider types (plaintext by design: the provider is untrusted
# and receives question material only, never silo documents).
T_PROVIDER_GENERATE = "provider_generate"
T_PROVIDER_RESULT = "provider_result"


class MalformedFrameError(FedRagError):
    """Frame body is not a valid envelope."""


def canonical_json(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def encode_envelope(msg_type: str, payload: object) -> bytes:
    return canonical_json({"type": msg_type, "payload": payload})


def decode_envelope(body: bytes) -> tuple[str, object]:
    try:
        obj = json.loads(body.decode("utf-8"))
        msg_type = obj["type"]
        payload = obj["payload"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise MalformedFrameError("frame body is not a valid envelope") from exc
    if not isinstance(msg_type, str):
        raise MalformedFrameError("envelope type must be a string")
    return msg_type, payload


def encode_sealed_envelope(msg_type: str, sealed_wire: bytes) -> bytes:
    return encode_envelope(msg_type, base64.b64encode(sealed_wire).decode("ascii"))


def decode_sealed_field(payload: object) -> bytes:
    if not isinstance(payload, str):
        raise MalformedFrameError("sealed payload must be a base64 string")
    try:
        return base64.b64decode(payload, validate=True)
    except (ValueError, TypeError) as exc:
        raise MalformedFrameError("sealed payload is not valid base64") from exc


def make_aad(kind: str, query_id: str) -> bytes:
    """Associated data binding a sealed payload to its message type and query."""
    return kind.encode("ascii") + b"/" + query_id.encode("ascii")


def send_frame(sock: socket.socket, body: bytes) -> None:
    if len(body) > MAX_FRAME_LEN:
        raise MalformedFrameError(f"frame of {len(body)} bytes exceeds {MAX_FRAME_LEN}")
    sock.sendall(struct.pack(">I", len(body)) + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> bytes | None:
    """Read one length-prefixed frame; None on orderly peer close."""
    header = _recv_exact(sock, FRAME_HEADER_LEN)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_LEN:
        raise MalformedFrameError(f"frame of {length} bytes exceeds {MAX_FRAME_LEN}")
    body = _recv_exact(sock, length)
    if body is None:
        return None
    return body
