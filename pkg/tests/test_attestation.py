from __future__ import annotations

import random

import pytest

from fedrag.attestation import (
    AttestationEvidence,
    AttestationVerifier,
    AuthorizationPolicy,
    ClientAttester,
    SigningIdentity,
    measure_manifest,
    sign_server_confirmation,
    verify_server_confirmation,
)
from fedrag.clock import VirtualClock
from fedrag.errors import (
    BadSignatureError,
    MeasurementDeniedError,
    ReplayDetectedError,
    UnknownClientError,
    UnknownIdentityError,
)

MANIFEST = {"role": "silo", "client_id": "client-0", "build": "release"}

# evidence produced once from seed-42 reference keys and a fixed nonce
GOLDEN_NONCE = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
GOLDEN_IDENTITY_PUB = "0b3913fae22de409b1de5726ffe30542199dc65b5181124be16f8253defde4b3"
GOLDEN_EVIDENCE = {
    "measurement": "871f180eb63ba925dba96164b735578245d3e17998e9d3de4b1568874da87921",
    "nonce": GOLDEN_NONCE.hex(),
    "client_pub": "c987b863434cb7a893bf72240433c8c65620597848f1b42afb5fa4c47dedb32a",
    "signature": (
        "ad050888eea04180a5184f1ef860dde5d4cda940da3ff0931e517f837fd52fba"
        "dd8392e9eeebce6dfff23f8afd0042bf0736394299b1da6c17534abcf586bc0b"
    ),
    "identity_key_id": "client-0",
}


def make_setup(clock=None, nonce_ttl=30.0):
    rng = random.Random(42)
    identity = SigningIdentity.generate("client-0", rng.randbytes)
    attester = ClientAttester(identity, MANIFEST, rng.randbytes)
    policy = AuthorizationPolicy(
        allowed_measurements={measure_manifest(MANIFEST)},
        registered_identities={"client-0": identity.public_bytes()},
        nonce_ttl_secs=nonce_ttl,
    )
    verifier = AttestationVerifier(policy, clock or VirtualClock(), random.Random(7).randbytes)
    return identity, attester, policy, verifier


def test_measurement_is_deterministic_and_key_order_free():
    assert measure_manifest(MANIFEST) == measure_manifest(dict(reversed(list(MANIFEST.items()))))
    changed = dict(MANIFEST, build="tampered")
    assert measure_manifest(changed) != measure_manifest(MANIFEST)


def test_challenges_are_fresh_and_single_outstanding():
    _, _, _, verifier = make_setup()
    n1 = verifier.issue_challenge("client-0")
    n2 = verifier.issue_challenge("client-0")
    assert n1 != n2 and len(n2) == 16


def test_unknown_client_cannot_be_challenged():
    _, _, _, verifier = make_setup()
    with pytest.raises(UnknownClientError):
        verifier.issue_challenge("intruder")


def test_golden_evidence_reproduces_and_verifies():
    rng = random.Random(42)
    identity = SigningIdentity.generate("client-0", rng.randbytes)
    assert identity.public_bytes().hex() == GOLDEN_IDENTITY_PUB
    attester = ClientAttester(identity, MANIFEST, rng.randbytes)
    evidence = attester.produce_evidence(GOLDEN_NONCE)
    assert evidence.to_json_dict() == GOLDEN_EVIDENCE

    # a verifier whose challenge draw is pinned to the golden nonce accepts
    # the frozen evidence as-is
    fill = random.Random(7)
    state = {"first": True}

    def rng_fn(n: int) -> bytes:
        if state["first"] and n == 16:
            state["first"] = False
            return GOLDEN_NONCE
        return fill.randbytes(n)

    policy = AuthorizationPolicy(
        allowed_measurements={GOLDEN_EVIDENCE["measurement"]},
        registered_identities={"client-0": bytes.fromhex(GOLDEN_IDENTITY_PUB)},
    )
    verifier = AttestationVerifier(policy, VirtualClock(), rng_fn)
    assert verifier.issue_challenge("client-0") == GOLDEN_NONCE
    result = verifier.verify_evidence(
        "client-0", AttestationEvidence.from_json_dict(GOLDEN_EVIDENCE)
    )
    assert result.session.client_id == "client-0"
    assert result.session.measurement == GOLDEN_EVIDENCE["measurement"]


def test_happy_path_and_key_agreement():
    _, attester, _, verifier = make_setup()
    nonce = verifier.issue_challenge("client-0")
    evidence = attester.produce_evidence(nonce)
    result = verifier.verify_evidence("client-0", evidence)
    client_key = attester.derive_session_key(result.server_pub)
    assert client_key == result.session.session_key
    assert len(client_key) == 32


def test_session_key_never_in_repr():
    _, attester, _, verifier = make_setup()
    nonce = verifier.issue_challenge("client-0")
    result = verifier.verify_evidence("client-0", attester.produce_evidence(nonce))
    assert result.session.session_key.hex() not in repr(result.session)


def test_wrong_nonce_rejected():
    _, attester, _, verifier = make_setup()
    verifier.issue_challenge("client-0")
    other = bytes(16)
    evidence = attester.produce_evidence(other)
    with pytest.raises(ReplayDetectedError):
        verifier.verify_evidence("client-0", evidence)


def test_nonce_single_use():
    _, attester, _, verifier = make_setup()
    nonce = verifier.issue_challenge("client-0")
    evidence = attester.produce_evidence(nonce)
    verifier.verify_evidence("client-0", evidence)
    with pytest.raises(ReplayDetectedError):
        verifier.verify_evidence("client-0", evidence)


def test_expired_challenge_rejected():
    clock = VirtualClock()
    _, attester, _, verifier = make_setup(clock=clock, nonce_ttl=30.0)
    nonce = verifier.issue_challenge("client-0")
    evidence = attester.produce_evidence(nonce)
    clock.advance(31.0)
    with pytest.raises(ReplayDetectedError):
        verifier.verify_evidence("client-0", evidence)


def test_signature_bit_flip_rejected():
    _, attester, _, verifier = make_setup()
    nonce = verifier.issue_challenge("client-0")
    evidence = attester.produce_evidence(nonce)
    bad_sig = bytearray(evidence.signature)
    bad_sig[3] ^= 0x10
    tampered = AttestationEvidence(
        measurement=evidence.measurement,
        nonce=evidence.nonce,
        client_pub=evidence.client_pub,
        signature=bytes(bad_sig),
        identity_key_id=evidence.identity_key_id,
    )
    with pytest.raises(BadSignatureError):
        verifier.verify_evidence("client-0", tampered)


def test_denied_measurement_rejected():
    rng = random.Random(9)
    identity = SigningIdentity.generate("client-0", rng.randbytes)
    evil = ClientAttester(identity, dict(MANIFEST, build="tampered"), rng.randbytes)
    policy = AuthorizationPolicy(
        allowed_measurements={measure_manifest(MANIFEST)},
        registered_identities={"client-0": identity.public_bytes()},
    )
    verifier = AttestationVerifier(policy, VirtualClock(), rng.randbytes)
    nonce = verifier.issue_challenge("client-0")
    with pytest.raises(MeasurementDeniedError):
        verifier.verify_evidence("client-0", evil.produce_evidence(nonce))


def test_unknown_identity_rejected():
    _, attester, policy, _ = make_setup()
    policy.registered_identities.pop("client-0")
    verifier = AttestationVerifier(policy, VirtualClock(), random.Random(3).randbytes)
    with pytest.raises(UnknownClientError):
        verifier.issue_challenge("client-0")


def test_identity_must_match_challenged_client():
    _, attester, policy, _ = make_setup()
    other = SigningIdentity.generate("client-1", random.Random(77).randbytes)
    policy.registered_identities["client-1"] = other.public_bytes()
    verifier = AttestationVerifier(policy, VirtualClock(), random.Random(3).randbytes)
    nonce = verifier.issue_challenge("client-1")
    evidence = attester.produce_evidence(nonce)  # signed by client-0's identity
    with pytest.raises(UnknownIdentityError):
        verifier.verify_evidence("client-1", evidence)


def test_policy_update_affects_only_next_handshake():
    _, attester, policy, verifier = make_setup()
    nonce = verifier.issue_challenge("client-0")
    session = verifier.verify_evidence("client-0", attester.produce_evidence(nonce)).session
    assert session is not None

    verifier.set_policy(
        AuthorizationPolicy(
            allowed_measurements=set(),
            registered_identities=dict(policy.registered_identities),
        )
    )
    nonce2 = verifier.issue_challenge("client-0")
    with pytest.raises(MeasurementDeniedError):
        verifier.verify_evidence("client-0", attester.produce_evidence(nonce2))
    # the earlier session object is untouched by the policy swap
    assert session.is_live(now=0.0)


def test_policy_file_round_trip(tmp_path):
    _, _, policy, _ = make_setup()
    path = tmp_path / "policy.json"
    policy.save(path)
    loaded = AuthorizationPolicy.load(path)
    assert loaded.allowed_measurements == policy.allowed_measurements
    assert loaded.registered_identities == policy.registered_identities
    assert loaded.nonce_ttl_secs == policy.nonce_ttl_secs


def test_server_confirmation_round_trip():
    server = SigningIdentity.generate("server", random.Random(1).randbytes)
    measurement = measure_manifest({"role": "orchestrator"})
    nonce = bytes(16)
    server_pub = bytes(range(32))
    client_pub = bytes(range(32, 64))
    sig = sign_server_confirmation(server, measurement, nonce, server_pub, client_pub, "k1")
    verify_server_confirmation(
        server.public_bytes(), measurement, measurement, nonce, server_pub, client_pub, "k1", sig
    )
    with pytest.raises(BadSignatureError):
        verify_server_confirmation(
            server.public_bytes(),
            measurement,
            measurement,
            nonce,
            server_pub,
            client_pub,
            "k2",  # wrong session id breaks the transcript binding
            sig,
        )
    with pytest.raises(MeasurementDeniedError):
        verify_server_confirmation(
            server.public_bytes(),
            "00" * 32,
            measurement,
            nonce,
            server_pub,
            client_pub,
            "k1",
            sig,
        )
