"""Capability credentials encoded as JWT claims, and presentations that bundle
several of them under one holder signature."""

from __future__ import annotations

import hashlib
import itertools
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, Union
from urllib.parse import urlsplit

from . import jose
from .errors import (
    CnfMismatch,
    CredentialError,
    EmptyCapabilities,
    EmptyTokenList,
    MalformedToken,
    NestedPresentation,
)
from .jose import KeyPair, PublicKeyJwk

VC_CONTEXT = "https://www.w3.org/2018/credentials/v1"
VC_TYPE = "VerifiableCredential"
RIGHTS = ("r", "w", "d")
STATUS_TYPE = "RevocationList2020Status"
JWT_TYP = "jwt"


def _check_relative_path(path: Any) -> str:
    if not isinstance(path, str) or not path:
        raise CredentialError("capability path must be a non-empty string")
    if path.startswith("/"):
        raise CredentialError(f"capability path {path!r} must be relative")
    segments = path.rstrip("/").split("/")
    if any(seg in ("", ".", "..") for seg in segments):
        raise CredentialError(f"capability path {path!r} has an empty, '.' or '..' segment")
    return path.rstrip("/")


@dataclass(frozen=True)
class Capability:
    """Rights (subset of r, w, d) over a path relative to the tenant prefix."""

    path: str
    rights: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "path", _check_relative_path(self.path))
        object.__setattr__(self, "rights", frozenset(self.rights))
        if not self.rights:
            raise CredentialError(f"capability {self.path!r} grants no rights")
        unknown = self.rights - set(RIGHTS)
        if unknown:
            raise CredentialError(f"unknown rights {sorted(unknown)} for {self.path!r}")

    @classmethod
    def of(cls, path: str, rights: Iterable[str]) -> Capability:
        return cls(path, frozenset(rights))

    @classmethod
    def from_wire(cls, entry: Any) -> Capability:
        """Parse the ``{"<path>": ["r", ...]}`` form used inside credentials."""
        if not isinstance(entry, Mapping) or len(entry) != 1:
            raise CredentialError("capability entry must be a single-key object")
        ((path, rights),) = entry.items()
        if not isinstance(rights, list) or not all(isinstance(r, str) for r in rights):
            raise CredentialError(f"rights for {path!r} must be a list of strings")
        return cls(path, frozenset(rights))

    def to_wire(self) -> dict[str, list[str]]:
        return {self.path: [r for r in RIGHTS if r in self.rights]}


@dataclass(frozen=True)
class RevocationStatusRef:
    index: int
    list_url: str
    type: str = STATUS_TYPE

    def __post_init__(self) -> None:
        if not jose.is_int(self.index) or self.index < 0:
            raise CredentialError("revocation index must be a non-negative integer")

    @classmethod
    def from_dict(cls, data: Any) -> RevocationStatusRef:
        if not isinstance(data, Mapping):
            raise CredentialError("credentialStatus must be an object")
        index = data.get("revocationListIndex")
        url = data.get("revocationListCredential")
        if not isinstance(index, str) or not index.isdigit() or not isinstance(url, str):
            raise CredentialError("credentialStatus needs a decimal index and a list URL")
        return cls(int(index), url, data.get("type", STATUS_TYPE))

    def to_dict(self) -> dict[str, str]:
        return {
            "type": self.type,
            "revocationListIndex": str(self.index),
            "revocationListCredential": self.list_url,
        }


@dataclass(frozen=True)
class CredentialDefinition:
    """The credential shape a resource server accepts: a type string, a
    context URI and the set of rights capabilities may use. Contexts are
    compared as opaque strings and never dereferenced."""

    type: str
    context: str
    rights: frozenset[str] = frozenset(RIGHTS)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CredentialDefinition:
        try:
            rights = frozenset(data.get("rights", RIGHTS))
            return cls(str(data["type"]), str(data["context"]), rights)
        except (KeyError, TypeError) as exc:
            raise CredentialError(f"bad credential definition: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": self.type,
            "context": self.context,
            "rights": [r for r in RIGHTS if r in self.rights],
        }


CAPABILITIES_DEFINITION = CredentialDefinition(
    "capabilities", "https://mm.aueb.gr/contexts/capabilities/v1"
)


@dataclass(frozen=True)
class VcObject:
    context: tuple[str, ...]
    type: tuple[str, ...]
    capabilities: tuple[Capability, ...]
    credential_status: RevocationStatusRef | None = None

    def __post_init__(self) -> None:
        if not self.context:
            raise CredentialError("@context must not be empty")
        if len(self.type) < 2 or VC_TYPE not in self.type:
            raise CredentialError("type must include VerifiableCredential and a definition type")

    @classmethod
    def for_definition(
        cls,
        definition: CredentialDefinition,
        capabilities: Sequence[Capability],
        status: RevocationStatusRef | None = None,
    ) -> VcObject:
        return cls(
            (VC_CONTEXT, definition.context),
            (VC_TYPE, definition.type),
            tuple(capabilities),
            status,
        )

    @classmethod
    def from_dict(cls, data: Any) -> VcObject:
        if not isinstance(data, Mapping):
            raise CredentialError("vc must be an object")
        context, types = data.get("@context"), data.get("type")
        if not isinstance(context, list) or not isinstance(types, list):
            raise CredentialError("vc @context and type must be lists")
        subject = data.get("credentialSubject")
        if not isinstance(subject, Mapping) or not isinstance(subject.get("capabilities"), list):
            raise CredentialError("credentialSubject.capabilities must be a list")
        status = data.get("credentialStatus")
        return cls(
            tuple(context),
            tuple(types),
            tuple(Capability.from_wire(c) for c in subject["capabilities"]),
            RevocationStatusRef.from_dict(status) if status is not None else None,
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"@context": list(self.context), "type": list(self.type)}
        if self.credential_status is not None:
            out["credentialStatus"] = self.credential_status.to_dict()
        out["credentialSubject"] = {"capabilities": [c.to_wire() for c in self.capabilities]}
        return out


@dataclass(frozen=True)
class AccessTokenVc:
    """The claims set of an access token."""

    jti: str
    iss: str
    iat: int
    exp: int
    cnf: PublicKeyJwk
    vc: VcObject

    def __post_init__(self) -> None:
        if self.exp <= self.iat:
            raise CredentialError("exp must be later than iat")

    @property
    def capabilities(self) -> tuple[Capability, ...]:
        return self.vc.capabilities

    @classmethod
    def from_claims(cls, claims: Mapping[str, Any]) -> AccessTokenVc:
        try:
            window = jose.JwtTimeWindow.from_claims(claims)
            cnf = claims.get("cnf")
            if not isinstance(cnf, Mapping):
                raise MalformedToken("cnf claim missing")
            jti, iss = claims.get("jti"), claims.get("iss")
            if not isinstance(jti, str) or not isinstance(iss, str) or window.exp is None:
                raise MalformedToken("jti, iss and exp are required")
            return cls(jti, iss, window.iat, window.exp,
                       PublicKeyJwk.from_dict(cnf.get("jwk")), VcObject.from_dict(claims.get("vc")))
        except CredentialError as exc:
            raise MalformedToken(f"bad credential: {exc}") from exc

    def to_claims(self) -> dict[str, Any]:
        return {
            "jti": self.jti,
            "iss": self.iss,
            "iat": self.iat,
            "exp": self.exp,
            "cnf": {"jwk": self.cnf.to_dict()},
            "vc": self.vc.to_dict(),
        }


@dataclass(frozen=True)
class VerifiablePresentation:
    iss: str
    tokens: tuple[str, ...]
    iat: int
    members: tuple[AccessTokenVc, ...] = field(default=(), compare=False, repr=False)

    def to_claims(self) -> dict[str, Any]:
        return {"iss": self.iss, "iat": self.iat, "vp": list(self.tokens)}


Presentation = Union[AccessTokenVc, VerifiablePresentation]


def credential_id(issuer_url: str, serial: int) -> str:
    parts = urlsplit(issuer_url)
    return f"{parts.scheme}://{parts.netloc}/credentials/{serial}"


class JtiSequence:
    """Per-issuer monotonic credential identifiers: ``<origin>/credentials/<n>``."""

    def __init__(self, start: int = 1):
        self._start = start
        self._counters: dict[str, itertools.count] = defaultdict(lambda: itertools.count(self._start))
        self._lock = threading.Lock()

    def next(self, issuer_url: str) -> str:
        parts = urlsplit(issuer_url)
        origin = f"{parts.scheme}://{parts.netloc}"
        with self._lock:
            n = next(self._counters[origin])
        return credential_id(issuer_url, n)


_default_jtis = JtiSequence()


def build_capability_vc(
    issuer_url: str,
    subject_key: PublicKeyJwk,
    capabilities: Sequence[Capability],
    validity: int,
    revocation_ref: RevocationStatusRef | None,
    now: int,
    *,
    definition: CredentialDefinition = CAPABILITIES_DEFINITION,
    jti: str | None = None,
) -> AccessTokenVc:
    if not capabilities:
        raise EmptyCapabilities("at least one capability is required")
    vc = VcObject.for_definition(definition, capabilities, revocation_ref)
    return AccessTokenVc(
        jti=jti or _default_jtis.next(issuer_url),
        iss=issuer_url,
        iat=int(now),
        exp=int(now) + int(validity),
        cnf=subject_key,
        vc=vc,
    )


def encode_vc_jwt(token: AccessTokenVc, signer: KeyPair) -> str:
    return jose.jws_sign(token.to_claims(), JWT_TYP, signer)


def holder_digest(key: PublicKeyJwk) -> str:
    """Lowercase hex sha-256 of the key's canonical JWK serialization."""
    return hashlib.sha256(key.canonical().encode("ascii")).hexdigest()


def _parse_token(compact: str) -> AccessTokenVc:
    payload = jose.decode_unverified(compact).payload
    if "vp" in payload:
        raise NestedPresentation("a presentation cannot contain another presentation")
    return AccessTokenVc.from_claims(payload)


def build_vp(tokens: Sequence[str], holder: KeyPair, now: int) -> str:
    if not tokens:
        raise EmptyTokenList("a presentation needs at least one token")
    for i, compact in enumerate(tokens):
        if _parse_token(compact).cnf != holder.public:
            raise CnfMismatch(f"token {i} is bound to a different key")
    vp = VerifiablePresentation(holder_digest(holder.public), tuple(tokens), int(now))
    return jose.jws_sign(vp.to_claims(), JWT_TYP, holder)


def parse_presentation(compact: str) -> Presentation:
    """Tell a single access token from a presentation. Signatures are not
    checked here. A payload carrying ``vp`` is a presentation even if it
    also carries ``vc``."""
    payload = jose.decode_unverified(compact).payload
    if "vp" not in payload:
        return AccessTokenVc.from_claims(payload)
    iss, iat, tokens = payload.get("iss"), payload.get("iat"), payload.get("vp")
    if not isinstance(iss, str) or not jose.is_int(iat):
        raise MalformedToken("presentation needs iss and iat")
    if not isinstance(tokens, list) or not tokens or not all(isinstance(t, str) for t in tokens):
        raise MalformedToken("vp must be a non-empty list of tokens")
    members = tuple(_parse_token(t) for t in tokens)
    return VerifiablePresentation(iss, tuple(tokens), iat, members)


def validate_credential_definition(
    vc: VcObject | Mapping[str, Any], definition: CredentialDefinition
) -> list[str]:
    """Check a credential's ``vc`` object against a definition.

    Returns the list of problems found; an empty list means it is accepted.
    """
    data = vc.to_dict() if isinstance(vc, VcObject) else vc
    problems = []
    types = data.get("type")
    if not isinstance(types, list) or definition.type not in types or VC_TYPE not in types:
        problems.append(f"type must contain {VC_TYPE!r} and {definition.type!r}")
    context = data.get("@context")
    if not isinstance(context, list) or definition.context not in context:
        problems.append(f"@context must contain {definition.context!r}")
    subject = data.get("credentialSubject")
    caps = subject.get("capabilities") if isinstance(subject, Mapping) else None
    if not isinstance(caps, list) or not caps:
        problems.append("credentialSubject.capabilities must be a non-empty list")
        return problems
    for i, entry in enumerate(caps):
        try:
            cap = Capability.from_wire(entry)
        except CredentialError as exc:
            problems.append(f"capabilities[{i}]: {exc}")
            continue
        extra = cap.rights - definition.rights
        if extra:
            problems.append(f"capabilities[{i}]: rights {sorted(extra)} not allowed")
    return problems
