"""Opaque, tamper-evident references to producer-resident objects.

User code may carry reference tokens like any other string but can never
read the producer endpoint or object key out of one: the payload is sealed
with AES-256-GCM under a cluster-wide provider secret and encoded with the
URL-safe base64 alphabet so it travels in text header fields.

Token layout before encoding: ``nonce (12) || ciphertext || tag (16)``.
A fresh random nonce per encode means two tokens for the same reference
never compare equal.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthError

REF_HEADER = "x-xdt-ref"

_KEY_SIZE = 32
_NONCE_SIZE = 12
_TAG_SIZE = 16
_AAD = b"xdt-ref-v1"
_MAX_OBJECT_KEY = 2**64 - 1


@dataclass(frozen=True)
class PlainReference:
    """Producer pull endpoint plus the per-producer object key."""

    producer_addr: str  # "host:port"
    object_key: int

    def __post_init__(self) -> None:
        if not (0 <= self.object_key <= _MAX_OBJECT_KEY):
            raise ValueError("object_key out of u64 range")
        if not self.producer_addr or ":" not in self.producer_addr:
            raise ValueError("producer_addr must be host:port")

    @property
    def host(self) -> str:
        return self.producer_addr.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.producer_addr.rsplit(":", 1)[1])


class ProviderSecret:
    """Cluster-wide symmetric key held only by provider components.

    The raw key never leaves this object: sealing, opening, and the data
    plane's connection MAC all go through methods.
    """

    __slots__ = ("_key", "_aead")

    def __init__(self, key_material: bytes) -> None:
        if len(key_material) != _KEY_SIZE:
            raise ValueError(f"key material must be {_KEY_SIZE} bytes")
        self._key = bytes(key_material)
        self._aead = AESGCM(self._key)

    @classmethod
    def generate(cls) -> "ProviderSecret":
        return cls(AESGCM.generate_key(bit_length=8 * _KEY_SIZE))

    def __repr__(self) -> str:  # never leak key material into logs
        return "ProviderSecret(<redacted>)"

    def seal(self, plaintext: bytes) -> bytes:
        nonce = os.urandom(_NONCE_SIZE)
        return nonce + self._aead.encrypt(nonce, plaintext, _AAD)

    def open(self, blob: bytes) -> bytes:
        if len(blob) < _NONCE_SIZE + _TAG_SIZE:
            raise AuthError("token too short")
        nonce, ct = blob[:_NONCE_SIZE], blob[_NONCE_SIZE:]
        try:
            return self._aead.decrypt(nonce, ct, _AAD)
        except InvalidTag:
            raise AuthError("token failed authentication") from None

    def mac(self, data: bytes) -> bytes:
        """Keyed MAC for the data-plane provider handshake."""
        return hmac.new(self._key, data, hashlib.sha256).digest()

    def verify_mac(self, data: bytes, tag: bytes) -> bool:
        return hmac.compare_digest(self.mac(data), tag)


def _pack_plain(plain: PlainReference) -> bytes:
    addr = plain.producer_addr.encode()
    if len(addr) > 0xFFFF:
        raise ValueError("producer_addr too long")
    return struct.pack(">H", len(addr)) + addr + struct.pack(">Q", plain.object_key)


def _unpack_plain(raw: bytes) -> PlainReference:
    if len(raw) < 2 + 8:
        raise AuthError("reference payload malformed")
    (alen,) = struct.unpack_from(">H", raw, 0)
    if len(raw) != 2 + alen + 8:
        raise AuthError("reference payload malformed")
    addr = raw[2 : 2 + alen].decode("utf-8", errors="strict")
    (key,) = struct.unpack_from(">Q", raw, 2 + alen)
    return PlainReference(addr, key)


def encode_reference(plain: PlainReference, secret: ProviderSecret) -> str:
    """Seal a plain reference into a printable opaque token."""
    return base64.urlsafe_b64encode(secret.seal(_pack_plain(plain))).decode("ascii")


def decode_reference(token: str, secret: ProviderSecret) -> PlainReference:
    """Open a token, raising AuthError unless it is byte-for-byte authentic.

    Decoding is strict: the token must be the canonical base64 encoding of
    the sealed blob, so every single-bit corruption of a genuine token is
    rejected (including flips that land in otherwise-ignored padding bits).
    """
    try:
        raw = base64.urlsafe_b64decode(token.encode("ascii"))
    except Exception:
        raise AuthError("token is not valid base64") from None
    if base64.urlsafe_b64encode(raw).decode("ascii") != token:
        raise AuthError("token encoding is not canonical")
    try:
        return _unpack_plain(secret.open(raw))
    except AuthError:
        raise
    except Exception:
        raise AuthError("reference payload malformed") from None
