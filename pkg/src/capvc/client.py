"""OAuth client and credential holder.

Holds one Ed25519 key, obtains capability tokens from authorization
servers, bundles them into presentations and calls the resource server with
a fresh DPoP proof per request.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
from filelock import FileLock

from . import dpop, jose
from .errors import CapvcError
from .jose import KeyPair
from .vc import build_vp

CONFIG_ENV = "CAPVC_CONFIG"


class ClientError(CapvcError):
    exit_code = 1


class OAuthError(ClientError):
    """The authorization server refused the request."""

    def __init__(self, error: str, description: str | None = None, status: int | None = None):
        self.error = error
        self.description = description
        self.status = status
        super().__init__(f"{error}: {description}" if description else error)


class ConfigError(ClientError):
    exit_code = 2


class NetworkError(ClientError):
    exit_code = 3


@dataclass
class ClientConfig:
    keypair: Path
    authorization_servers: dict[str, dict[str, str]] = field(default_factory=dict)
    resource_server: str = ""
    token_cache: Path = Path("tokens")

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> ClientConfig:
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            raise ConfigError(f"no config file given and ${CONFIG_ENV} is unset")
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base=path.parent)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: Path = Path(".")) -> ClientConfig:
        def resolve(p: str) -> Path:
            return Path(p) if Path(p).is_absolute() else base / p

        try:
            servers = {
                name: dict(entry) if isinstance(entry, Mapping) else {"token_endpoint": entry}
                for name, entry in data.get("authorization_servers", {}).items()
            }
            return cls(
                keypair=resolve(data["keypair"]),
                authorization_servers=servers,
                resource_server=data.get("resource_server", ""),
                token_cache=resolve(data.get("token_cache", "tokens")),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigError(f"bad client config: {exc}") from exc


class TokenCache:
    """Access tokens on disk keyed by (AS name, RS URL). Never holds keys."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)

    def _file(self, as_name: str, rs_url: str) -> Path:
        digest = hashlib.sha256(rs_url.encode()).hexdigest()[:16]
        return self.directory / f"{as_name}-{digest}.json"

    def _lock(self) -> FileLock:
        self.directory.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.directory / ".lock"))

    def store(self, as_name: str, rs_url: str, token: str) -> None:
        exp = jose.decode_unverified(token).payload.get("exp")
        entry = {"as": as_name, "rs": rs_url, "access_token": token, "exp": exp}
        with self._lock():
            self._file(as_name, rs_url).write_text(json.dumps(entry))

    def load(self, as_name: str, rs_url: str) -> dict[str, Any] | None:
        with self._lock():
            path = self._file(as_name, rs_url)
            if not path.exists():
                return None
            return json.loads(path.read_text())


class Client:
    def __init__(
        self,
        config: ClientConfig,
        http: httpx.Client | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.config = config
        self.http = http or httpx.Client(timeout=30.0)
        self.clock = clock
        self.cache = TokenCache(config.token_cache)
        self._keypair: KeyPair | None = None

    @property
    def keypair(self) -> KeyPair:
        if self._keypair is None:
            try:
                self._keypair = jose.load_keypair(self.config.keypair)
            except (OSError, ValueError, CapvcError) as exc:
                raise ConfigError(f"cannot load keypair {self.config.keypair}: {exc}") from exc
        return self._keypair

    def _now(self) -> int:
        return int(self.clock())

    def _endpoint(self, as_name: str) -> dict[str, str]:
        try:
            return self.config.authorization_servers[as_name]
        except KeyError:
            raise ConfigError(f"unknown authorization server {as_name!r}") from None

    def request_token(self, as_name: str) -> str:
        """Run the token request and cache the result."""
        endpoint = self._endpoint(as_name)
        url = endpoint["token_endpoint"]
        form = {
            "grant_type": "client_credentials",
            "dpop": dpop.build_proof("POST", url, self.keypair, self._now()),
        }
        if endpoint.get("resource"):
            form["resource"] = endpoint["resource"]
        try:
            resp = self.http.post(url, data=form)
        except httpx.TransportError as exc:
            raise NetworkError(f"cannot reach {url}: {exc}") from exc
        try:
            body = resp.json()
        except ValueError:
            body = {}
        if resp.status_code != 200 or "access_token" not in body:
            raise OAuthError(body.get("error", f"http_{resp.status_code}"),
                             body.get("error_description"), resp.status_code)
        token = body["access_token"]
        self.cache.store(as_name, self.config.resource_server, token)
        return token

    def cached_token(self, as_name: str, auto_renew: bool = False) -> str:
        entry = self.cache.load(as_name, self.config.resource_server)
        if entry is None:
            return self.request_token(as_name)
        exp = entry.get("exp")
        if isinstance(exp, int) and self._now() > exp:
            if not auto_renew:
                raise ClientError(f"cached token for {as_name} expired; use --auto-renew")
            return self.request_token(as_name)
        return entry["access_token"]

    def combine(self, tokens: Sequence[str]) -> str:
        return build_vp(list(tokens), self.keypair, self._now())

    def access(self, method: str, url: str, token: str, body: bytes | None = None) -> httpx.Response:
        """Send one resource request with a DPoP proof minted for exactly this
        method and URL."""
        method = method.upper()
        headers = {
            "Authorization": f"DPoP {token}",
            "DPoP": dpop.build_proof(method, url, self.keypair, self._now()),
        }
        try:
            return self.http.request(method, url, headers=headers, content=body)
        except httpx.TransportError as exc:
            raise NetworkError(f"cannot reach {url}: {exc}") from exc
