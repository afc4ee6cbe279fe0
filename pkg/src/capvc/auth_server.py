"""Per-organization authorization server.

Clients authenticate purely by proving possession of a key (a DPoP proof on
the token request). The server looks the key up in the access table for the
target resource server and issues a capability credential bound to that key.
It also answers introspection requests and publishes its revocation list.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from . import jose, revocation
from .dpop import ReplayCache, verify_proof
from .errors import (
    BadSignature,
    CredentialError,
    MalformedToken,
    ProofError,
    SchemaError,
    TokenNotFound,
    UnsupportedAlgorithm,
)
from .jose import KeyPair, PublicKeyJwk, load_keypair
from .response import Response, oauth_error
from .vc import (
    CAPABILITIES_DEFINITION,
    AccessTokenVc,
    Capability,
    CredentialDefinition,
    RevocationStatusRef,
    build_capability_vc,
    credential_id,
    encode_vc_jwt,
)

logger = logging.getLogger(__name__)

DEFAULT_TOKEN_LIFETIME = 10 * 24 * 3600
GRANT_TYPE = "client_credentials"


@dataclass(frozen=True)
class AccessTable:
    """Client key (canonical JWK) to capabilities, for one resource server."""

    resource_server: str
    entries: Mapping[str, tuple[Capability, ...]]

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, key: PublicKeyJwk) -> tuple[Capability, ...] | None:
        return self.entries.get(key.canonical())


def load_access_table(document: Mapping[str, Any] | str | bytes) -> AccessTable:
    """Validate and load an access table document.

    Expected shape::

        {"resource_server": "cloud",
         "clients": [{"name": "C1", "jwk": {...},
                      "capabilities": [{"folder1": ["r", "w"]}]}]}

    The whole load fails on the first bad entry; SchemaError.path points at it.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"not JSON: {exc}") from exc
    if not isinstance(document, Mapping):
        raise SchemaError("$", "access table must be an object")
    rs = document.get("resource_server", "default")
    if not isinstance(rs, str) or not rs:
        raise SchemaError("$.resource_server", "must be a non-empty string")
    clients = document.get("clients", [])
    if not isinstance(clients, list):
        raise SchemaError("$.clients", "must be a list")

    entries: dict[str, tuple[Capability, ...]] = {}
    for i, client in enumerate(clients):
        where = f"$.clients[{i}]"
        if not isinstance(client, Mapping):
            raise SchemaError(where, "must be an object")
        try:
            key = PublicKeyJwk.from_dict(client.get("jwk"))
        except MalformedToken as exc:
            raise SchemaError(f"{where}.jwk", str(exc)) from exc
        caps = client.get("capabilities")
        if not isinstance(caps, list) or not caps:
            raise SchemaError(f"{where}.capabilities", "must be a non-empty list")
        parsed = []
        for j, entry in enumerate(caps):
            try:
                parsed.append(Capability.from_wire(entry))
            except CredentialError as exc:
                raise SchemaError(f"{where}.capabilities[{j}]", str(exc)) from exc
        if key.canonical() in entries:
            raise SchemaError(f"{where}.jwk", "duplicate client key")
        entries[key.canonical()] = tuple(parsed)
    return AccessTable(rs, entries)


def access_table_document(
    resource_server: str, clients: Mapping[PublicKeyJwk, list[Capability]]
) -> dict[str, Any]:
    """Inverse of :func:`load_access_table`, handy for tests and tooling."""
    return {
        "resource_server": resource_server,
        "clients": [
            {"jwk": key.to_dict(), "capabilities": [c.to_wire() for c in caps]}
            for key, caps in clients.items()
        ],
    }


@dataclass(frozen=True)
class IssuedTokenRecord:
    jti: str
    revocation_index: int
    subject: PublicKeyJwk
    exp: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "jti": self.jti,
            "revocation_index": self.revocation_index,
            "subject": self.subject.to_dict(),
            "exp": self.exp,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> IssuedTokenRecord:
        return cls(
            data["jti"], data["revocation_index"], PublicKeyJwk.from_dict(data["subject"]), data["exp"]
        )


class AuthorizationServer:
    def __init__(
        self,
        url: str,
        keypair: KeyPair,
        access_tables: AccessTable | Mapping[str, AccessTable],
        *,
        token_endpoint: str | None = None,
        introspection_endpoint: str | None = None,
        revocation_list_url: str | None = None,
        token_lifetime: int = DEFAULT_TOKEN_LIFETIME,
        list_length: int = revocation.DEFAULT_LENGTH,
        definition: CredentialDefinition = CAPABILITIES_DEFINITION,
        replay_cache: ReplayCache | None = None,
        state_path: str | os.PathLike | None = None,
        clock: Callable[[], float] = time.time,
    ):
        if token_lifetime <= 0:
            raise ValueError("token lifetime must be positive")
        base = url.rstrip("/")
        self.url = url
        self.keypair = keypair
        self.token_endpoint = token_endpoint or f"{base}/token"
        self.introspection_endpoint = introspection_endpoint or f"{base}/introspect"
        self.revocation_list_url = revocation_list_url or f"{base}/revocation-list"
        self.token_lifetime = token_lifetime
        self.definition = definition
        self.replay_cache = replay_cache or ReplayCache()
        self.clock = clock
        self.set_access_tables(access_tables)

        self.revocation_list = revocation.new_list(list_length)
        self._records: dict[str, IssuedTokenRecord] = {}
        self._serial = 0
        self._next_index = 0
        self._lock = threading.Lock()
        self._signed_list: tuple[int, str] | None = None
        self.state_path = Path(state_path) if state_path else None
        if self.state_path and self.state_path.exists():
            self._load_state()

    @property
    def public_key(self) -> PublicKeyJwk:
        return self.keypair.public

    def set_access_tables(self, tables: AccessTable | Mapping[str, AccessTable]) -> None:
        """Swap in a new set of access tables in one assignment."""
        if isinstance(tables, AccessTable):
            tables = {tables.resource_server: tables}
        self._tables = dict(tables)

    def _now(self, now: int | None) -> int:
        return int(self.clock()) if now is None else int(now)

    # -- token endpoint ---------------------------------------------------------

    def handle_token_request(
        self,
        http_method: str,
        http_uri: str,
        body_fields: Mapping[str, str],
        now: int | None = None,
    ) -> Response:
        now = self._now(now)
        grant_type = body_fields.get("grant_type")
        proof = body_fields.get("dpop")
        if http_method.upper() != "POST":
            return oauth_error(400, "invalid_request", "token requests must use POST")
        if not grant_type or not proof:
            return oauth_error(400, "invalid_request", "grant_type and dpop are required")
        if grant_type != GRANT_TYPE:
            return oauth_error(400, "unsupported_grant_type")

        table = self._select_table(body_fields.get("resource"))
        if table is None:
            return oauth_error(400, "invalid_request", "unknown or ambiguous resource server")

        try:
            client_key = verify_proof(proof, http_method, http_uri, self.replay_cache, now)
        except ProofError as exc:
            return oauth_error(400, "invalid_dpop_proof", exc.reason)

        capabilities = table.lookup(client_key)
        if not capabilities:
            return oauth_error(401, "invalid_client")

        try:
            index, serial = self._allocate()
        except revocation.IndexOutOfRange:
            logger.error("revocation list of %s is exhausted", self.url)
            return oauth_error(500, "server_error", "revocation list exhausted")

        status = RevocationStatusRef(index, self.revocation_list_url)
        claims = build_capability_vc(
            self.url,
            client_key,
            capabilities,
            self.token_lifetime,
            status,
            now,
            definition=self.definition,
            jti=credential_id(self.url, serial),
        )
        token = encode_vc_jwt(claims, self.keypair)
        self._record(IssuedTokenRecord(claims.jti, index, client_key, claims.exp))
        body = {"access_token": token, "token_type": "DPoP", "expires_in": self.token_lifetime}
        return Response(200, body, {"Cache-Control": "no-store"})

    def _select_table(self, resource: str | None) -> AccessTable | None:
        if resource:
            return self._tables.get(resource)
        if len(self._tables) == 1:
            return next(iter(self._tables.values()))
        return None

    def _allocate(self) -> tuple[int, int]:
        with self._lock:
            if self._next_index >= len(self.revocation_list):
                raise revocation.IndexOutOfRange("no free revocation index")
            index = self._next_index
            self._next_index += 1
            self._serial += 1
            return index, self._serial

    def _record(self, record: IssuedTokenRecord) -> None:
        with self._lock:
            self._records[record.jti] = record
            self._save_state()

    def issued(self, jti: str) -> IssuedTokenRecord:
        try:
            return self._records[jti]
        except KeyError:
            raise TokenNotFound(jti) from None

    # -- introspection ----------------------------------------------------------

    def handle_introspection(self, body_fields: Mapping[str, str], now: int | None = None) -> Response:
        token = body_fields.get("token")
        if not token:
            return oauth_error(400, "invalid_request", "token is required")
        now = self._now(now)
        inactive = Response(200, {"active": False})
        try:
            _, claims = jose.jws_verify(token, self.public_key)
            parsed = AccessTokenVc.from_claims(claims)
        except (MalformedToken, BadSignature, UnsupportedAlgorithm):
            return inactive
        record = self._records.get(parsed.jti)
        if record is None or parsed.iss != self.url or now > record.exp:
            return inactive
        if self.revocation_list.is_revoked(record.revocation_index):
            return inactive
        return Response(200, {
            "active": True,
            "iss": parsed.iss,
            "exp": parsed.exp,
            "cnf": {"jwk": parsed.cnf.to_dict()},
        })

    # -- revocation -------------------------------------------------------------

    def revoke_token(self, jti: str) -> None:
        record = self.issued(jti)
        with self._lock:
            self.revocation_list.revoke(record.revocation_index)
            self._save_state()

    def signed_revocation_list(self, now: int | None = None) -> str:
        """The current list as a signed credential; re-signed only when the
        list has changed since the last call."""
        _, version = self.revocation_list.snapshot()
        cached = self._signed_list
        if cached is not None and cached[0] == version:
            return cached[1]
        compact = revocation.encode_list_credential(
            self.revocation_list, self.url, self._now(now), self.keypair
        )
        self._signed_list = (version, compact)
        return compact

    def handle_revocation_list(self, now: int | None = None) -> Response:
        return Response(200, self.signed_revocation_list(now), media_type="application/jwt")

    # -- persistence ------------------------------------------------------------

    def _save_state(self) -> None:
        if self.state_path is None:
            return
        bits, version = self.revocation_list.snapshot()
        state = {
            "serial": self._serial,
            "next_index": self._next_index,
            "records": [r.to_dict() for r in self._records.values()],
            "revocation_list": {"bits": jose.b64url_encode(bits), "version": version},
        }
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.state_path.parent, prefix=".state-")
        with os.fdopen(fd, "w") as fh:
            json.dump(state, fh)
        os.replace(tmp, self.state_path)

    def _load_state(self) -> None:
        assert self.state_path is not None
        state = json.loads(self.state_path.read_text())
        self._serial = state["serial"]
        self._next_index = state["next_index"]
        self._records = {r["jti"]: IssuedTokenRecord.from_dict(r) for r in state["records"]}
        rl = state["revocation_list"]
        self.revocation_list = revocation.RevocationList.from_bytes(
            jose.b64url_decode(rl["bits"]), rl["version"]
        )


# -- configuration ----------------------------------------------------------------


def from_config(config: Mapping[str, Any] | str | os.PathLike, **overrides: Any) -> AuthorizationServer:
    """Build a server from a JSON config (a mapping or a path to one).

    Keys: ``url``, ``keypair`` (path), ``access_tables`` (list of paths),
    and optionally ``token_endpoint``, ``introspection_endpoint``,
    ``revocation_list_url``, ``token_lifetime``, ``list_length``,
    ``state_path``, ``credential_definition``. Relative paths resolve
    against the config file's directory.
    """
    base = Path(".")
    if not isinstance(config, Mapping):
        base = Path(config).parent
        config = json.loads(Path(config).read_text())

    def resolve(p: str) -> Path:
        return Path(p) if Path(p).is_absolute() else base / p

    try:
        url = config["url"]
        keypair = load_keypair(resolve(config["keypair"]))
        table_paths = config.get("access_tables") or [config["access_table"]]
    except KeyError as exc:
        raise SchemaError(f"$.{exc.args[0]}", "required") from exc
    tables = {}
    for path in table_paths:
        table = load_access_table(resolve(path).read_text())
        tables[table.resource_server] = table
    definition = CAPABILITIES_DEFINITION
    if "credential_definition" in config:
        definition = CredentialDefinition.from_dict(config["credential_definition"])
    kwargs: dict[str, Any] = {
        k: config[k]
        for k in ("token_endpoint", "introspection_endpoint", "revocation_list_url",
                  "token_lifetime", "list_length")
        if k in config
    }
    if "state_path" in config:
        kwargs["state_path"] = resolve(config["state_path"])
    kwargs.update(overrides)
    return AuthorizationServer(url, keypair, tables, definition=definition, **kwargs)
