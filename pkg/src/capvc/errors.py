"""Exception hierarchy.

Every error carries a short machine-readable ``reason`` that ends up in OAuth
error bodies and ``WWW-Authenticate`` headers. Resource-server failures also
carry the HTTP ``status`` they map to.
"""

from __future__ import annotations


class CapvcError(Exception):
    reason = "error"

    def __init__(self, message: str | None = None):
        super().__init__(message or self.reason)


# -- jose --------------------------------------------------------------------


class MalformedToken(CapvcError, ValueError):
    reason = "malformed_token"


class UnsupportedAlgorithm(CapvcError):
    reason = "unsupported_algorithm"


class BadSignature(CapvcError):
    reason = "bad_signature"


# -- dpop --------------------------------------------------------------------


class ProofError(CapvcError):
    """A DPoP proof failed one of the verification steps."""

    reason = "invalid_dpop_proof"


class MalformedProof(ProofError):
    reason = "malformed_proof"


class WrongType(ProofError):
    reason = "wrong_type"


class BadProofSignature(ProofError):
    reason = "bad_signature"


class MethodMismatch(ProofError):
    reason = "method_mismatch"


class UriMismatch(ProofError):
    reason = "uri_mismatch"


class Replayed(ProofError):
    reason = "replayed"


class Stale(ProofError):
    reason = "stale"


# -- credentials ---------------------------------------------------------------


class CredentialError(CapvcError, ValueError):
    reason = "invalid_credential"


class EmptyCapabilities(CredentialError):
    reason = "empty_capabilities"


class EmptyTokenList(CredentialError):
    reason = "empty_token_list"


class NestedPresentation(CredentialError):
    reason = "nested_presentation"


# -- revocation ----------------------------------------------------------------


class InvalidLength(CapvcError, ValueError):
    reason = "invalid_length"


class IndexOutOfRange(CapvcError, IndexError):
    reason = "index_out_of_range"


class MalformedList(CapvcError, ValueError):
    reason = "malformed_list"


# -- configuration ---------------------------------------------------------------


class SchemaError(CapvcError, ValueError):
    """A configuration document failed validation; ``path`` locates the entry."""

    reason = "schema_error"

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class TokenNotFound(CapvcError, KeyError):
    reason = "not_found"


# -- resource server -------------------------------------------------------------


class AccessDenied(CapvcError):
    status = 401


class UnknownResource(AccessDenied):
    status = 404
    reason = "unknown_resource"


class MissingCredentials(AccessDenied):
    reason = "invalid_request"


class BadRequest(AccessDenied):
    status = 400
    reason = "invalid_request"


class InvalidToken(AccessDenied):
    reason = "invalid_token"


class IssuerMismatch(AccessDenied):
    reason = "issuer_mismatch"


class BadTokenSignature(AccessDenied):
    reason = "bad_token_signature"


class CnfMismatch(AccessDenied, CredentialError):
    """Raised both when assembling a presentation and when a token's ``cnf``
    key differs from the key that signed the DPoP proof."""

    status = 401
    reason = "cnf_mismatch"


class BadProof(AccessDenied):
    reason = "invalid_dpop_proof"

    def __init__(self, cause: ProofError):
        self.cause = cause
        super().__init__(f"{self.reason}: {cause.reason}")


class Expired(AccessDenied):
    reason = "expired"


class Revoked(AccessDenied):
    reason = "revoked"


class RevocationUnavailable(AccessDenied):
    status = 503
    reason = "revocation_unavailable"


class MixedCnf(AccessDenied):
    reason = "mixed_cnf"


class BadVpSignature(AccessDenied):
    reason = "bad_vp_signature"


class VpIssuerMismatch(AccessDenied):
    reason = "vp_issuer_mismatch"


class InsufficientCapabilities(AccessDenied):
    status = 403
    reason = "insufficient_capabilities"
