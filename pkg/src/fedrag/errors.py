"""Exception hierarchy shared across the package."""


class FedRagError(Exception):
    """Base class for every error raised by this package."""


class EmptyTextError(FedRagError):
    """Text input was empty or whitespace-only."""


class DimMismatchError(FedRagError):
    """Vector dimensionality does not match the index or spec."""


class EmptyCorpusError(FedRagError):
    """An index build was attempted over zero snippets."""


class IndexFormatError(FedRagError):
    """Persisted index file is corrupt, truncated, or has a bad magic/version."""


class EmptyFederationError(FedRagError):
    """Fusion was invoked with zero client result lists."""


class UnknownClientError(FedRagError):
    """Client id is not registered in the authorization policy."""


class UnknownIdentityError(FedRagError):
    """Evidence names an identity key id the policy does not know."""


class BadSignatureError(FedRagError):
    """Evidence signature failed verification."""


class MeasurementDeniedError(FedRagError):
    """Evidence measurement is not in the policy allowlist."""


class ReplayDetectedError(FedRagError):
    """Nonce was reused, expired, or does not match the outstanding challenge."""


class AuthenticationFailure(FedRagError):
    """Sealed payload failed integrity checking.

    Deliberately opaque: every integrity failure (bad tag, wrong key, bad
    aad, malformed structure, stale counter) raises this one type so a
    receiver never acts as a decryption oracle.
    """


class PayloadTooLargeError(FedRagError):
    """Plaintext exceeds the configured sealing limit."""


class NonceExhaustedError(FedRagError):
    """Per-key nonce counter wrapped; the session must be closed."""


class HandshakeRequiredError(FedRagError):
    """Operation needs an established attested session and none exists."""


class InsufficientRespondersError(FedRagError):
    """Fewer valid silo responses than min_responders arrived by the deadline."""


class EmptyContextError(FedRagError):
    """Prompt construction was attempted with zero context documents."""


class BackendUnavailableError(FedRagError):
    """Generation backend could not be reached or timed out."""


class EndpointUnreachableError(FedRagError):
    """Confidential inference endpoint could not be reached."""


class InferenceError(FedRagError):
    """Generation failed after retrieval succeeded."""


class IngestError(FedRagError):
    """Corpus ingestion failed (too many malformed lines, unreadable file)."""


class ConfigError(FedRagError):
    """A configuration file is missing, unparseable, or inconsistent."""


class BenchmarkAbortError(FedRagError):
    """Benchmark aborted (too many federation failures)."""
