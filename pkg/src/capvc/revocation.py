"""Bitstring revocation lists.

Bit ``i`` set means the credential with revocation index ``i`` is revoked.
Index ``i`` lives in byte ``i // 8`` at bit ``7 - i % 8`` (most significant
bit first). The list is published as a JWS signed by the issuing AS and
checked locally by whoever downloads it; there is deliberately no operation
that asks the issuer about a single index.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any

from . import jose
from .errors import (
    IndexOutOfRange,
    InvalidLength,
    MalformedList,
    MalformedToken,
    UnsupportedAlgorithm,
)
from .jose import KeyPair, PublicKeyJwk

DEFAULT_LENGTH = 131072
LIST_TYP = "jwt"


class RevocationList:
    def __init__(self, length_bits: int = DEFAULT_LENGTH):
        if not jose.is_int(length_bits) or length_bits <= 0 or length_bits % 8:
            raise InvalidLength(f"length must be a positive multiple of 8, got {length_bits!r}")
        self._bits = bytearray(length_bits // 8)
        self.version = 0
        self._lock = threading.Lock()

    @classmethod
    def from_bytes(cls, data: bytes, version: int = 0) -> RevocationList:
        out = cls(len(data) * 8)
        out._bits[:] = data
        out.version = version
        return out

    def __len__(self) -> int:
        return len(self._bits) * 8

    def _locate(self, index: int) -> tuple[int, int]:
        if not jose.is_int(index) or not 0 <= index < len(self):
            raise IndexOutOfRange(f"index {index!r} outside 0..{len(self) - 1}")
        return index // 8, 0x80 >> (index % 8)

    def revoke(self, index: int) -> None:
        byte, mask = self._locate(index)
        with self._lock:
            self._bits[byte] |= mask
            self.version += 1

    def clear(self, index: int) -> None:
        """Administrative un-revocation."""
        byte, mask = self._locate(index)
        with self._lock:
            self._bits[byte] &= ~mask & 0xFF
            self.version += 1

    def is_revoked(self, index: int) -> bool:
        byte, mask = self._locate(index)
        return bool(self._bits[byte] & mask)

    def snapshot(self) -> tuple[bytes, int]:
        with self._lock:
            return bytes(self._bits), self.version

    def revoked_indices(self) -> list[int]:
        data, _ = self.snapshot()
        return [i for i in range(len(data) * 8) if data[i // 8] & (0x80 >> (i % 8))]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RevocationList):
            return NotImplemented
        return self._bits == other._bits

    def __repr__(self) -> str:
        return f"RevocationList(length={len(self)}, version={self.version})"


def new_list(length_bits: int = DEFAULT_LENGTH) -> RevocationList:
    return RevocationList(length_bits)


def revoke_index(rl: RevocationList, index: int) -> RevocationList:
    rl.revoke(index)
    return rl


def is_revoked(rl: RevocationList, index: int) -> bool:
    return rl.is_revoked(index)


@dataclass(frozen=True)
class RevocationListCredential:
    issuer: str
    encoded_list: str
    issued_at: int
    version: int = 0

    def to_claims(self) -> dict[str, Any]:
        return {
            "iss": self.issuer,
            "iat": self.issued_at,
            "version": self.version,
            "encodedList": self.encoded_list,
        }


def encode_list_credential(rl: RevocationList, issuer: str, now: int, signer: KeyPair) -> str:
    data, version = rl.snapshot()
    cred = RevocationListCredential(issuer, jose.b64url_encode(data), int(now), version)
    return jose.jws_sign(cred.to_claims(), LIST_TYP, signer)


def read_list_credential(compact: str, issuer_key: PublicKeyJwk) -> RevocationListCredential:
    try:
        _, claims = jose.jws_verify(compact, issuer_key)
    except (MalformedToken, UnsupportedAlgorithm) as exc:
        raise MalformedList(str(exc)) from exc
    issuer, iat, encoded = claims.get("iss"), claims.get("iat"), claims.get("encodedList")
    version = claims.get("version", 0)
    if not isinstance(issuer, str) or not jose.is_int(iat) or not isinstance(encoded, str):
        raise MalformedList("list credential needs iss, iat and encodedList")
    if not jose.is_int(version):
        raise MalformedList("version must be an integer")
    return RevocationListCredential(issuer, encoded, iat, version)


def decode_list_credential(compact: str, issuer_key: PublicKeyJwk) -> RevocationList:
    """Verify a signed list and return its bitstring.

    Raises BadSignature when the signature does not match ``issuer_key`` and
    MalformedList for anything structurally wrong.
    """
    cred = read_list_credential(compact, issuer_key)
    try:
        data = jose.b64url_decode(cred.encoded_list)
    except MalformedToken as exc:
        raise MalformedList("encodedList is not base64url") from exc
    if not data:
        raise MalformedList("encodedList is empty")
    return RevocationList.from_bytes(data, cred.version)

