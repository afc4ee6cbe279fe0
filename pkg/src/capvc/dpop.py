"""DPoP proofs: a self-signed JWS pinned to one HTTP method and URI.

The verifier runs the checks in a fixed order (key extraction, signature,
method/URI, identifier reuse, freshness) and raises a distinct
:class:`~capvc.errors.ProofError` subclass for each failure.
"""

from __future__ import annotations

import heapq
import os
import threading
from typing import Any
from urllib.parse import urlsplit, urlunsplit

from . import jose
from .errors import (
    BadProofSignature,
    BadSignature,
    MalformedProof,
    MalformedToken,
    MethodMismatch,
    Replayed,
    Stale,
    UnsupportedAlgorithm,
    UriMismatch,
    WrongType,
)
from .jose import KeyPair, PublicKeyJwk

DPOP_TYP = "dpop+jwt"
DEFAULT_WINDOW = 60
_DEFAULT_PORTS = {"http": 80, "https": 443}


def normalize_uri(uri: str) -> str:
    """Lowercase scheme and host and drop default ports and fragments.

    Raises ValueError for anything that is not an absolute http(s) URI.
    """
    parts = urlsplit(uri)
    scheme = parts.scheme.lower()
    if scheme not in _DEFAULT_PORTS or not parts.hostname:
        raise ValueError(f"not an absolute http(s) URI: {uri!r}")
    host = parts.hostname.lower()
    if ":" in host:
        host = f"[{host}]"
    port = parts.port
    if port is not None and port != _DEFAULT_PORTS[scheme]:
        host = f"{host}:{port}"
    return urlunsplit((scheme, host, parts.path or "/", parts.query, ""))


def new_jti() -> str:
    return "0x" + os.urandom(16).hex()


def build_proof(method: str, uri: str, signer: KeyPair, now: int) -> str:
    normalize_uri(uri)
    payload = {"htm": method.upper(), "htu": uri, "iat": int(now), "jti": new_jti()}
    return jose.jws_sign(payload, DPOP_TYP, signer, {"jwk": signer.public.to_dict()})


class ReplayCache:
    """Identifiers of accepted proofs, kept until they could no longer pass
    the freshness check anyway.

    One cache belongs to one verifier. :meth:`admit` does the reuse check,
    the freshness check and the insert under a single lock.
    """

    def __init__(self, window: int = DEFAULT_WINDOW, skew: int = jose.DEFAULT_SKEW):
        if window < 0 or skew < 0:
            raise ValueError("window and skew must be non-negative")
        self.window = window
        self.skew = skew
        self._seen: dict[str, int] = {}
        self._expiry_heap: list[tuple[int, str]] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._seen)

    def __contains__(self, jti: str) -> bool:
        return jti in self._seen

    def _evict(self, now: int) -> None:
        heap = self._expiry_heap
        while heap and heap[0][0] < now:
            expiry, jti = heapq.heappop(heap)
            if self._seen.get(jti) == expiry:
                del self._seen[jti]

    def admit(self, jti: str, iat: int, now: int) -> None:
        with self._lock:
            self._evict(now)
            if jti in self._seen:
                raise Replayed(f"jti {jti} already used")
            if now - iat > self.window or iat > now + self.skew:
                raise Stale(f"iat {iat} outside freshness window at {now}")
            expiry = iat + self.window + self.skew
            self._seen[jti] = expiry
            heapq.heappush(self._expiry_heap, (expiry, jti))


def read_proof_key(compact: str) -> tuple[jose.JwsEnvelope, PublicKeyJwk]:
    """Decode a proof and pull the public key out of its header (unverified)."""
    try:
        envelope = jose.decode_unverified(compact)
    except MalformedToken as exc:
        raise MalformedProof(str(exc)) from exc
    if envelope.header.get("typ") != DPOP_TYP:
        raise WrongType(f"typ {envelope.header.get('typ')!r}")
    try:
        key = PublicKeyJwk.from_dict(envelope.header.get("jwk"))
    except MalformedToken as exc:
        raise MalformedProof(f"header jwk: {exc}") from exc
    return envelope, key


def verify_proof(
    compact: str,
    expected_method: str,
    expected_uri: str,
    cache: ReplayCache,
    now: int,
) -> PublicKeyJwk:
    envelope, key = read_proof_key(compact)
    try:
        jose.verify_envelope(envelope, key)
    except UnsupportedAlgorithm as exc:
        raise MalformedProof(str(exc)) from exc
    except BadSignature as exc:
        raise BadProofSignature(str(exc)) from exc

    claims: dict[str, Any] = envelope.payload
    htm, htu, jti, iat = (claims.get(k) for k in ("htm", "htu", "jti", "iat"))
    if not all(isinstance(v, str) for v in (htm, htu, jti)) or not jose.is_int(iat):
        raise MalformedProof("htm, htu, jti and iat are required")
    if not jti or len(jti) > 256:
        raise MalformedProof("jti must be a non-empty string")

    if htm != expected_method.upper():
        raise MethodMismatch(f"proof is for {htm}, request is {expected_method}")
    try:
        if normalize_uri(htu) != normalize_uri(expected_uri):
            raise UriMismatch(f"proof is for {htu}, request is {expected_uri}")
    except ValueError as exc:
        raise UriMismatch(str(exc)) from exc

    cache.admit(jti, iat, now)
    return key
