"""Ed25519 keys, JWK encoding and JWS compact serialization.

Only ``EdDSA`` over Ed25519 is supported. Anything else is rejected before a
key is ever touched, which closes the usual algorithm-confusion holes.

Every signature generation and verification goes through :func:`_sign` and
:func:`_verify`, which feed a process-wide counter. :func:`count_operations`
exposes the counter so callers can audit how many public-key operations a
protocol step costs.
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
import os
import re
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import BadSignature, MalformedToken, UnsupportedAlgorithm

ALG = "EdDSA"
DEFAULT_SKEW = 5

_B64URL = re.compile(r"^[A-Za-z0-9_-]*$")


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict unpadded base64url decoding.

    Rejects padding, the standard alphabet, and non-canonical encodings (where
    unused trailing bits are set), so every byte string has exactly one
    accepted text form.
    """
    if not isinstance(text, str) or not _B64URL.match(text) or len(text) % 4 == 1:
        raise MalformedToken("invalid base64url segment")
    try:
        data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError) as exc:
        raise MalformedToken("invalid base64url segment") from exc
    if b64url_encode(data) != text:
        raise MalformedToken("non-canonical base64url segment")
    return data


def compact_json(obj: Any, *, sort_keys: bool = False) -> bytes:
    return json.dumps(obj, separators=(",", ":"), sort_keys=sort_keys).encode("utf-8")


# -- operation accounting -----------------------------------------------------


@dataclass
class OperationCount:
    signs: int = 0
    verifies: int = 0


_counter_lock = threading.Lock()
_totals = OperationCount()


@contextmanager
def count_operations() -> Iterator[OperationCount]:
    """Count sign/verify calls made while the block runs.

    The yielded object is filled in when the block exits. Counting is
    process-wide, so concurrent work in other threads is included.
    """
    with _counter_lock:
        start = OperationCount(_totals.signs, _totals.verifies)
    result = OperationCount()
    try:
        yield result
    finally:
        with _counter_lock:
            result.signs = _totals.signs - start.signs
            result.verifies = _totals.verifies - start.verifies


def _sign(key: Ed25519PrivateKey, data: bytes) -> bytes:
    with _counter_lock:
        _totals.signs += 1
    return key.sign(data)


def _verify(key: Ed25519PublicKey, signature: bytes, data: bytes) -> bool:
    with _counter_lock:
        _totals.verifies += 1
    try:
        key.verify(signature, data)
    except InvalidSignature:
        return False
    return True


# -- keys -----------------------------------------------------------------------


@dataclass(frozen=True)
class PublicKeyJwk:
    """An Ed25519 public key in JWK form (``kty`` OKP, ``crv`` Ed25519)."""

    x: str

    kty = "OKP"
    crv = "Ed25519"

    def __post_init__(self) -> None:
        try:
            raw = b64url_decode(self.x)
        except MalformedToken as exc:
            raise MalformedToken("jwk x is not base64url") from exc
        if len(raw) != 32:
            raise MalformedToken("jwk x must encode 32 bytes")

    @classmethod
    def from_bytes(cls, raw: bytes) -> PublicKeyJwk:
        return cls(b64url_encode(raw))

    @classmethod
    def from_dict(cls, data: Any) -> PublicKeyJwk:
        if not isinstance(data, Mapping):
            raise MalformedToken("jwk must be an object")
        if data.get("kty") != cls.kty or data.get("crv") != cls.crv:
            raise MalformedToken("jwk must be an OKP/Ed25519 key")
        if "d" in data:
            raise MalformedToken("jwk carries private key material")
        x = data.get("x")
        if not isinstance(x, str):
            raise MalformedToken("jwk x missing")
        return cls(x)

    @classmethod
    def parse(cls, text: str | bytes) -> PublicKeyJwk:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise MalformedToken("jwk is not JSON") from exc

    def to_dict(self) -> dict[str, str]:
        return {"crv": self.crv, "kty": self.kty, "x": self.x}

    def canonical(self) -> str:
        """Sorted-key, whitespace-free serialization; the basis for equality."""
        return compact_json(self.to_dict(), sort_keys=True).decode("ascii")

    @property
    def raw(self) -> bytes:
        return b64url_decode(self.x)

    def public_key(self) -> Ed25519PublicKey:
        return Ed25519PublicKey.from_public_bytes(self.raw)


class KeyPair:
    """An Ed25519 signing key and its public JWK. The seed never leaves here
    except through :meth:`to_private_jwk`."""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._private = private_key
        raw_public = private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self.public = PublicKeyJwk.from_bytes(raw_public)

    @property
    def secret(self) -> bytes:
        return self._private.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    def sign(self, data: bytes) -> bytes:
        return _sign(self._private, data)

    def to_private_jwk(self) -> dict[str, str]:
        return {**self.public.to_dict(), "d": b64url_encode(self.secret)}

    @classmethod
    def from_private_jwk(cls, data: Mapping[str, Any]) -> KeyPair:
        if data.get("kty") != "OKP" or data.get("crv") != "Ed25519":
            raise MalformedToken("not an OKP/Ed25519 private key")
        pair = keypair_from_seed(b64url_decode(data.get("d", "")))
        if "x" in data and data["x"] != pair.public.x:
            raise MalformedToken("private jwk x does not match d")
        return pair

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.x!r})"


def generate_keypair() -> KeyPair:
    return keypair_from_seed(os.urandom(32))


def keypair_from_seed(seed: bytes) -> KeyPair:
    """Deterministic keypair from a 32-byte seed. Meant for tests and for
    loading stored keys."""
    if len(seed) != 32:
        raise ValueError("Ed25519 seed must be 32 bytes")
    return KeyPair(Ed25519PrivateKey.from_private_bytes(seed))


def load_keypair(path: str | os.PathLike) -> KeyPair:
    return KeyPair.from_private_jwk(json.loads(Path(path).read_text()))


def save_keypair(keypair: KeyPair, path: str | os.PathLike, *, force: bool = False) -> None:
    """Write a private JWK readable only by the owner."""
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flags = os.O_WRONLY | os.O_CREAT | os.O_TRUNC
    fd = os.open(path, flags, 0o600)
    with os.fdopen(fd, "w") as fh:
        json.dump(keypair.to_private_jwk(), fh)
    os.chmod(path, 0o600)


# -- JWS --------------------------------------------------------------------------


def jws_sign(
    payload: Mapping[str, Any],
    typ: str,
    signer: KeyPair,
    extra_header: Mapping[str, Any] | None = None,
) -> str:
    header = {"typ": typ, "alg": ALG}
    if extra_header:
        header.update(extra_header)
    signing_input = (
        b64url_encode(compact_json(header)) + "." + b64url_encode(compact_json(dict(payload)))
    )
    signature = signer.sign(signing_input.encode("ascii"))
    return signing_input + "." + b64url_encode(signature)


@dataclass(frozen=True)
class JwsEnvelope:
    header: dict[str, Any]
    payload: dict[str, Any]
    signature: bytes
    signing_input: bytes


def _json_segment(segment: str, what: str) -> dict[str, Any]:
    try:
        value = json.loads(b64url_decode(segment).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedToken(f"{what} is not JSON") from exc
    if not isinstance(value, dict):
        raise MalformedToken(f"{what} is not a JSON object")
    return value


def decode_unverified(compact: str) -> JwsEnvelope:
    """Split and decode a compact JWS without checking the signature."""
    if not isinstance(compact, str):
        raise MalformedToken("token must be a string")
    parts = compact.split(".")
    if len(parts) != 3:
        raise MalformedToken("token must have three segments")
    header = _json_segment(parts[0], "header")
    payload = _json_segment(parts[1], "payload")
    signature = b64url_decode(parts[2])
    if len(signature) != 64:
        raise MalformedToken("signature must be 64 bytes")
    return JwsEnvelope(header, payload, signature, f"{parts[0]}.{parts[1]}".encode("ascii"))


def verify_envelope(envelope: JwsEnvelope, key: PublicKeyJwk) -> None:
    if envelope.header.get("alg") != ALG:
        raise UnsupportedAlgorithm(f"alg {envelope.header.get('alg')!r} not accepted")
    if not _verify(key.public_key(), envelope.signature, envelope.signing_input):
        raise BadSignature("signature does not verify")


def jws_verify(compact: str, key: PublicKeyJwk) -> tuple[dict[str, Any], dict[str, Any]]:
    envelope = decode_unverified(compact)
    verify_envelope(envelope, key)
    return envelope.header, envelope.payload


# -- time windows -------------------------------------------------------------------


class WindowCheck(enum.Enum):
    ACCEPT = "accept"
    EXPIRED = "expired"
    NOT_FRESH = "not_fresh"

    def __bool__(self) -> bool:
        return self is WindowCheck.ACCEPT


@dataclass(frozen=True)
class JwtTimeWindow:
    iat: int
    exp: int | None = None

    def __post_init__(self) -> None:
        if self.exp is not None and self.exp <= self.iat:
            raise ValueError("exp must be strictly greater than iat")

    @classmethod
    def from_claims(cls, claims: Mapping[str, Any]) -> JwtTimeWindow:
        iat, exp = claims.get("iat"), claims.get("exp")
        if not is_int(iat) or (exp is not None and not is_int(exp)):
            raise MalformedToken("iat/exp must be integers")
        try:
            return cls(iat, exp)
        except ValueError as exc:
            raise MalformedToken(str(exc)) from exc


def is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def check_time_window(
    claims: JwtTimeWindow | Mapping[str, Any], now: int, skew: int = DEFAULT_SKEW
) -> WindowCheck:
    if skew < 0:
        raise ValueError("skew must be non-negative")
    if not isinstance(claims, JwtTimeWindow):
        claims = JwtTimeWindow.from_claims(claims)
    if claims.exp is not None and now > claims.exp + skew:
        return WindowCheck.EXPIRED
    if now < claims.iat - skew:
        return WindowCheck.NOT_FRESH
    return WindowCheck.ACCEPT
