"""Multi-tenant file store guarded by capability tokens.

The resource table maps path prefixes (one per tenant) to the authorization
server responsible for them. A request is authorized when the presented
token, or presentation of tokens, was issued by that server, is bound to the
key that signed the accompanying DPoP proof, is unexpired and unrevoked, and
carries a capability covering the requested path and operation.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Sequence
from urllib.parse import unquote, urlsplit

from . import dpop, jose, revocation
from .errors import (
    AccessDenied,
    BadProof,
    BadRequest,
    BadSignature,
    BadTokenSignature,
    BadVpSignature,
    CapvcError,
    CnfMismatch,
    Expired,
    IndexOutOfRange,
    InsufficientCapabilities,
    InvalidToken,
    IssuerMismatch,
    MalformedToken,
    MissingCredentials,
    MixedCnf,
    ProofError,
    RevocationUnavailable,
    Revoked,
    SchemaError,
    UnknownResource,
    UnsupportedAlgorithm,
    VpIssuerMismatch,
)
from .jose import PublicKeyJwk, WindowCheck
from .response import Response
from .vc import (
    CAPABILITIES_DEFINITION,
    AccessTokenVc,
    Capability,
    CredentialDefinition,
    VerifiablePresentation,
    holder_digest,
    parse_presentation,
    validate_credential_definition,
)

logger = logging.getLogger(__name__)

OPERATIONS = {"GET": "r", "PUT": "w", "POST": "w", "DELETE": "d"}
DEFAULT_LIST_MAX_AGE = 300


def normalize_path(raw: str) -> str:
    """Percent-decode once, collapse duplicate slashes, drop a trailing slash.

    Raises ValueError for relative paths and for any '.' or '..' segment.
    """
    path = unquote(raw)
    if not path.startswith("/"):
        raise ValueError(f"path {raw!r} is not absolute")
    segments = [s for s in path.split("/") if s]
    if any(s in (".", "..") for s in segments) or "\x00" in path:
        raise ValueError(f"path {raw!r} has a dot segment")
    return "/" + "/".join(segments)


def _is_under(path: str, prefix: str) -> bool:
    if prefix == "/":
        return True
    return path == prefix or path.startswith(prefix + "/")


def evaluate_capabilities(
    caps: Iterable[Capability], operation: str, path: str, tenant_prefix: str
) -> bool:
    """True iff some capability covers ``path`` (segment-wise, relative to the
    tenant prefix) and grants ``operation``."""
    base = tenant_prefix.rstrip("/")
    for cap in caps:
        if operation in cap.rights and _is_under(path, f"{base}/{cap.path}"):
            return True
    return False


# -- resource table ---------------------------------------------------------------


@dataclass(frozen=True)
class ResourceEntry:
    prefix: str
    as_url: str
    as_key: PublicKeyJwk
    introspection_url: str | None = None
    revocation_allowlist: tuple[str, ...] = ()
    revocation_method: str = "list"

    def list_url_allowed(self, url: str) -> bool:
        if self.revocation_allowlist:
            return url in self.revocation_allowlist
        ours, theirs = urlsplit(self.as_url), urlsplit(url)
        return (ours.scheme, ours.netloc) == (theirs.scheme, theirs.netloc)


@dataclass(frozen=True)
class ResourceTable:
    entries: Mapping[str, ResourceEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, path: str) -> ResourceEntry:
        """Longest segment-wise prefix match."""
        best = None
        for prefix, entry in self.entries.items():
            if _is_under(path, prefix) and (best is None or len(prefix) > len(best.prefix)):
                best = entry
        if best is None:
            raise UnknownResource(f"no tenant owns {path}")
        return best

    def for_issuer(self, as_url: str) -> ResourceEntry:
        for entry in self.entries.values():
            if entry.as_url == as_url:
                return entry
        raise IssuerMismatch(f"no resource-table entry for issuer {as_url}")


def load_resource_table(document: Mapping[str, Any] | str | bytes) -> ResourceTable:
    """Load ``{"<prefix>": {"as_url": ..., "as_key": {jwk}, ...}}``.

    Optional per-entry keys: ``introspection_url``, ``revocation_allowlist``
    and ``revocation_method`` (``"list"``, the default, or
    ``"introspection"``).
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"not JSON: {exc}") from exc
    if not isinstance(document, Mapping):
        raise SchemaError("$", "resource table must be an object")
    entries: dict[str, ResourceEntry] = {}
    keys_by_issuer: dict[str, PublicKeyJwk] = {}
    for prefix, item in document.items():
        where = f"$[{prefix!r}]"
        try:
            norm = normalize_path(prefix)
        except ValueError as exc:
            raise SchemaError(where, str(exc)) from exc
        if norm != prefix:
            raise SchemaError(where, f"prefix must be normalized (expected {norm!r})")
        if not isinstance(item, Mapping) or not isinstance(item.get("as_url"), str):
            raise SchemaError(where, "entry needs as_url")
        try:
            key = PublicKeyJwk.from_dict(item.get("as_key"))
        except MalformedToken as exc:
            raise SchemaError(f"{where}.as_key", str(exc)) from exc
        method = item.get("revocation_method", "list")
        if method not in ("list", "introspection", "none"):
            raise SchemaError(f"{where}.revocation_method", f"unknown method {method!r}")
        introspection_url = item.get("introspection_url")
        if method == "introspection" and not isinstance(introspection_url, str):
            raise SchemaError(f"{where}.introspection_url", "required for introspection")
        allow = item.get("revocation_allowlist", [])
        if not isinstance(allow, list) or not all(isinstance(u, str) for u in allow):
            raise SchemaError(f"{where}.revocation_allowlist", "must be a list of URLs")
        as_url = item["as_url"]
        if keys_by_issuer.setdefault(as_url, key) != key:
            raise SchemaError(f"{where}.as_key", f"conflicting keys for {as_url}")
        entries[norm] = ResourceEntry(norm, as_url, key, introspection_url, tuple(allow), method)
    return ResourceTable(entries)


# -- requests ---------------------------------------------------------------------


@dataclass(frozen=True)
class ResourceRequest:
    method: str
    uri: str
    authorization: str | None = None
    dpop_proof: str | None = None
    body: bytes = b""

    @property
    def path(self) -> str:
        return normalize_path(urlsplit(self.uri).path or "/")

    @property
    def operation(self) -> str:
        try:
            return OPERATIONS[self.method.upper()]
        except KeyError:
            raise BadRequest(f"method {self.method} is not supported") from None

    @property
    def token(self) -> str:
        if not self.authorization:
            raise MissingCredentials("missing Authorization header")
        scheme, _, token = self.authorization.partition(" ")
        if scheme.lower() != "dpop" or not token.strip():
            raise MissingCredentials("Authorization must use the DPoP scheme")
        return token.strip()

    @classmethod
    def from_headers(
        cls, method: str, uri: str, headers: Mapping[str, str], body: bytes = b""
    ) -> ResourceRequest:
        lower = {k.lower(): v for k, v in headers.items()}
        return cls(method.upper(), uri, lower.get("authorization"), lower.get("dpop"), body)


class Grant(NamedTuple):
    issuer: str
    capability: Capability


# -- revocation status ------------------------------------------------------------


def http_fetch_list(url: str) -> str:
    import httpx

    response = httpx.get(url, timeout=10.0)
    response.raise_for_status()
    return response.text


def http_introspect(url: str, token: str) -> Mapping[str, Any]:
    import httpx

    response = httpx.post(url, data={"token": token}, timeout=10.0)
    response.raise_for_status()
    return response.json()


@dataclass
class _CachedList:
    rl: revocation.RevocationList
    fetched_at: int


class RevocationListCache:
    """Downloaded revocation lists keyed by URL, re-fetched after ``max_age``
    seconds. One downloaded list answers for every credential that points
    at it."""

    def __init__(
        self,
        fetch: Callable[[str], str] = http_fetch_list,
        max_age: int = DEFAULT_LIST_MAX_AGE,
    ):
        self.fetch = fetch
        self.max_age = max_age
        self.fetches = 0
        self._lists: dict[str, _CachedList] = {}
        self._lock = threading.Lock()

    def invalidate(self, url: str | None = None) -> None:
        with self._lock:
            if url is None:
                self._lists.clear()
            else:
                self._lists.pop(url, None)

    def get(self, url: str, issuer_key: PublicKeyJwk, now: int) -> revocation.RevocationList:
        with self._lock:
            cached = self._lists.get(url)
            if cached is not None and now - cached.fetched_at <= self.max_age:
                return cached.rl
            compact = self.fetch(url)
            self.fetches += 1
            rl = revocation.decode_list_credential(compact, issuer_key)
            self._lists[url] = _CachedList(rl, now)
            return rl


# -- the server -------------------------------------------------------------------


class ResourceServer:
    def __init__(
        self,
        base_url: str,
        table: ResourceTable,
        storage_root: str | os.PathLike,
        *,
        definition: CredentialDefinition = CAPABILITIES_DEFINITION,
        replay_cache: dpop.ReplayCache | None = None,
        revocation_cache: RevocationListCache | None = None,
        introspect: Callable[[str, str], Mapping[str, Any]] = http_introspect,
        fail_open: bool = False,
        skew: int = jose.DEFAULT_SKEW,
        clock: Callable[[], float] = time.time,
    ):
        self.base_url = base_url.rstrip("/")
        self.table = table
        self.storage_root = Path(storage_root)
        self.definition = definition
        self.replay_cache = replay_cache or dpop.ReplayCache()
        self.revocation_cache = revocation_cache or RevocationListCache()
        self.introspect = introspect
        self.fail_open = fail_open
        self.skew = skew
        self.clock = clock
        self._path_locks: dict[Path, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    # -- verification steps -----------------------------------------------------

    def _verified_claims(self, compact: str, entry: ResourceEntry) -> AccessTokenVc:
        try:
            envelope = jose.decode_unverified(compact)
        except MalformedToken as exc:
            raise InvalidToken(str(exc)) from exc
        if envelope.payload.get("iss") != entry.as_url:
            raise IssuerMismatch(f"token issued by {envelope.payload.get('iss')!r}, "
                                 f"resource is governed by {entry.as_url}")
        try:
            jose.verify_envelope(envelope, entry.as_key)
        except (BadSignature, UnsupportedAlgorithm) as exc:
            raise BadTokenSignature(str(exc)) from exc
        try:
            claims = AccessTokenVc.from_claims(envelope.payload)
        except MalformedToken as exc:
            raise InvalidToken(str(exc)) from exc
        problems = validate_credential_definition(envelope.payload["vc"], self.definition)
        if problems:
            raise InvalidToken("; ".join(problems))
        return claims

    def _check_binding(self, request: ResourceRequest, bound_key: PublicKeyJwk, now: int) -> None:
        if not request.dpop_proof:
            raise MissingCredentials("missing DPoP header")
        try:
            _, proof_key = dpop.read_proof_key(request.dpop_proof)
        except ProofError as exc:
            raise BadProof(exc) from exc
        if proof_key.canonical() != bound_key.canonical():
            raise CnfMismatch("token is bound to a different key than the DPoP proof")
        try:
            dpop.verify_proof(request.dpop_proof, request.method, request.uri, self.replay_cache, now)
        except ProofError as exc:
            raise BadProof(exc) from exc

    def _check_status(self, compact: str, claims: AccessTokenVc, entry: ResourceEntry, now: int) -> None:
        window = jose.check_time_window(jose.JwtTimeWindow(claims.iat, claims.exp), now, self.skew)
        if window is WindowCheck.EXPIRED:
            raise Expired(f"token expired at {claims.exp}")
        if window is WindowCheck.NOT_FRESH:
            raise InvalidToken("token issued in the future")
        try:
            if entry.revocation_method == "introspection":
                revoked = not self._introspect(entry, compact)
            elif entry.revocation_method == "list" and claims.vc.credential_status is not None:
                revoked = self._list_says_revoked(claims, entry, now)
            else:
                revoked = False
        except RevocationUnavailable:
            if not self.fail_open:
                raise
            logger.warning("revocation status of %s unavailable; failing open", claims.jti)
            revoked = False
        if revoked:
            raise Revoked(f"token {claims.jti} has been revoked")

    def _introspect(self, entry: ResourceEntry, compact: str) -> bool:
        assert entry.introspection_url is not None
        try:
            result = self.introspect(entry.introspection_url, compact)
        except Exception as exc:
            raise RevocationUnavailable(f"introspection failed: {exc}") from exc
        return bool(result.get("active"))

    def _list_says_revoked(self, claims: AccessTokenVc, entry: ResourceEntry, now: int) -> bool:
        status = claims.vc.credential_status
        assert status is not None
        if not entry.list_url_allowed(status.list_url):
            raise InvalidToken(f"revocation list {status.list_url} is not allowed")
        try:
            rl = self.revocation_cache.get(status.list_url, entry.as_key, now)
        except CapvcError as exc:
            raise RevocationUnavailable(f"bad revocation list: {exc}") from exc
        except Exception as exc:
            raise RevocationUnavailable(f"cannot fetch revocation list: {exc}") from exc
        try:
            return rl.is_revoked(status.index)
        except IndexOutOfRange as exc:
            raise InvalidToken(str(exc)) from exc

    # -- public verification API ------------------------------------------------

    def verify_access_token(
        self,
        token: str,
        request: ResourceRequest,
        entry: ResourceEntry | None = None,
        now: int | None = None,
    ) -> list[Capability]:
        now = int(self.clock()) if now is None else int(now)
        entry = entry or self.table.resolve(request.path)
        claims = self._verified_claims(token, entry)
        self._check_binding(request, claims.cnf, now)
        self._check_status(token, claims, entry, now)
        return list(claims.capabilities)

    def verify_vp_token(
        self, vp: str, request: ResourceRequest, now: int | None = None
    ) -> list[Grant]:
        """Verify a presentation and return the union of its members' grants.

        Each member is checked against the table entry of its own issuer, so
        every grant stays scoped to that issuer's tenant. Any failing member
        denies the whole request.
        """
        now = int(self.clock()) if now is None else int(now)
        try:
            presentation = parse_presentation(vp)
        except (MalformedToken, CapvcError) as exc:
            raise InvalidToken(str(exc)) from exc
        if not isinstance(presentation, VerifiablePresentation):
            raise InvalidToken("not a presentation")

        verified: list[tuple[str, AccessTokenVc, ResourceEntry]] = []
        for member in presentation.tokens:
            iss = jose.decode_unverified(member).payload.get("iss")
            if not isinstance(iss, str):
                raise IssuerMismatch("member token has no issuer")
            entry = self.table.for_issuer(iss)
            verified.append((member, self._verified_claims(member, entry), entry))

        holder = verified[0][1].cnf
        if any(claims.cnf != holder for _, claims, _ in verified):
            raise MixedCnf("member tokens are bound to different keys")
        try:
            jose.verify_envelope(jose.decode_unverified(vp), holder)
        except (BadSignature, UnsupportedAlgorithm) as exc:
            raise BadVpSignature(str(exc)) from exc
        if presentation.iss != holder_digest(holder):
            raise VpIssuerMismatch("presentation iss is not the holder key digest")

        self._check_binding(request, holder, now)
        for member, claims, entry in verified:
            self._check_status(member, claims, entry, now)
        return [Grant(claims.iss, cap) for _, claims, _ in verified for cap in claims.capabilities]

    def authorize(self, request: ResourceRequest, now: int | None = None) -> ResourceEntry:
        """Run the whole decision for a request; raises AccessDenied on deny."""
        now = int(self.clock()) if now is None else int(now)
        try:
            path = request.path
        except ValueError as exc:
            raise BadRequest(str(exc)) from exc
        operation = request.operation
        entry = self.table.resolve(path)
        token = request.token
        if not request.dpop_proof:
            raise MissingCredentials("missing DPoP header")
        try:
            is_vp = "vp" in jose.decode_unverified(token).payload
        except MalformedToken as exc:
            raise InvalidToken(str(exc)) from exc
        if is_vp:
            grants = self.verify_vp_token(token, request, now)
            caps: Sequence[Capability] = [g.capability for g in grants if g.issuer == entry.as_url]
        else:
            caps = self.verify_access_token(token, request, entry, now)
        if not evaluate_capabilities(caps, operation, path, entry.prefix):
            raise InsufficientCapabilities(f"no capability grants {operation} on {path}")
        return entry

    # -- HTTP-level handler -------------------------------------------------------

    def handle_resource_request(self, request: ResourceRequest, now: int | None = None) -> Response:
        try:
            self.authorize(request, now)
        except AccessDenied as exc:
            return _denied(exc)
        path = request.path
        op = request.operation
        if op == "r":
            return self._read(path)
        if op == "w":
            return self._write(path, request.body)
        return self._delete(path)

    def handle(
        self, method: str, path_and_query: str, headers: Mapping[str, str], body: bytes = b"",
        now: int | None = None,
    ) -> Response:
        request = ResourceRequest.from_headers(method, self.base_url + path_and_query, headers, body)
        return self.handle_resource_request(request, now)

    # -- storage ----------------------------------------------------------------

    def _file(self, path: str) -> Path:
        root = self.storage_root.resolve()
        target = (root / path.lstrip("/")).resolve()
        if root not in target.parents:
            raise BadRequest(f"{path} escapes the storage root")
        return target

    def _lock_for(self, target: Path) -> threading.Lock:
        with self._locks_guard:
            return self._path_locks[target]

    def _read(self, path: str) -> Response:
        target = self._file(path)
        if not target.is_file():
            return Response(404, {"error": "not_found"})
        return Response(200, target.read_bytes(), media_type="application/octet-stream")

    def _write(self, path: str, body: bytes) -> Response:
        target = self._file(path)
        if target.is_dir():
            return Response(409, {"error": "is_a_directory"})
        with self._lock_for(target):
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".upload-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(body)
            os.replace(tmp, target)
        return Response(200, {"path": path, "size": len(body)})

    def _delete(self, path: str) -> Response:
        target = self._file(path)
        with self._lock_for(target):
            if not target.is_file():
                return Response(404, {"error": "not_found"})
            target.unlink()
        return Response(200, {"path": path, "deleted": True})


def _denied(exc: AccessDenied) -> Response:
    body = {"error": exc.reason, "error_description": str(exc)}
    headers = {}
    if exc.status == 401:
        headers["WWW-Authenticate"] = f'DPoP error="{exc.reason}"'
    return Response(exc.status, body, headers)


def from_config(config: Mapping[str, Any] | str | os.PathLike, **overrides: Any) -> ResourceServer:
    """Build a server from JSON config: ``base_url``, ``resource_table``
    (path), ``storage_root`` and optionally ``list_max_age``, ``fail_open``,
    ``credential_definition``."""
    base = Path(".")
    if not isinstance(config, Mapping):
        base = Path(config).parent
        config = json.loads(Path(config).read_text())

    def resolve(p: str) -> Path:
        return Path(p) if Path(p).is_absolute() else base / p

    try:
        table = load_resource_table(resolve(config["resource_table"]).read_text())
        base_url, root = config["base_url"], resolve(config["storage_root"])
    except KeyError as exc:
        raise SchemaError(f"$.{exc.args[0]}", "required") from exc
    kwargs: dict[str, Any] = {
        "revocation_cache": RevocationListCache(max_age=config.get("list_max_age", DEFAULT_LIST_MAX_AGE)),
        "fail_open": bool(config.get("fail_open", False)),
    }
    if "credential_definition" in config:
        kwargs["definition"] = CredentialDefinition.from_dict(config["credential_definition"])
    kwargs.update(overrides)
    return ResourceServer(base_url, table, root, **kwargs)
