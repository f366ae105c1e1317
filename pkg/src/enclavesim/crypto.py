"""Pinned cryptographic primitives shared by every subsystem.

Algorithms are fixed so that all on-disk and on-wire formats are bit-exact:
AES-256-GCM for AEAD, SHA-256 for hashing, HMAC-SHA-256 for key derivation,
X25519 for ephemeral key agreement, Ed25519 for signatures. All functions
are pure; nonce discipline is the caller's responsibility.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
DIGEST_SIZE = 32
SIGNATURE_SIZE = 64
MAX_KDF_LABEL = 32

# every KDF label used anywhere in this package
KDF_LABELS = ("mht", "data", "hdr", "c2s", "s2a", "a2s", "fin", "vault")


class AuthError(Exception):
    """AEAD open failed: wrong key/nonce/aad or tampered ciphertext."""


def _check_key(key: bytes) -> None:
    if len(key) != KEY_SIZE:
        raise ValueError(f"AES-256-GCM key must be {KEY_SIZE} bytes, got {len(key)}")


def _check_nonce(nonce: bytes) -> None:
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes, got {len(nonce)}")


def aead_seal(key: bytes, nonce: bytes, aad: bytes, plaintext: bytes) -> bytes:
    """AES-256-GCM seal. Returns ciphertext || 16-byte tag."""
    _check_key(key)
    _check_nonce(nonce)
    return AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_open(key: bytes, nonce: bytes, aad: bytes, sealed: bytes) -> bytes:
    """Inverse of aead_seal; raises AuthError on any authentication failure."""
    _check_key(key)
    _check_nonce(nonce)
    if len(sealed) < TAG_SIZE:
        raise AuthError("sealed input shorter than the authentication tag")
    try:
        return AESGCM(key).decrypt(nonce, sealed, aad)
    except InvalidTag:
        raise AuthError("AEAD authentication failed") from None


def hash_data(data: bytes) -> bytes:
    """SHA-256, 32-byte digest."""
    return hashlib.sha256(data).digest()


def kdf(root: bytes, label: str, context: bytes) -> bytes:
    """Derive a 32-byte key: HMAC-SHA-256(root, label || 0x00 || context)."""
    _check_key(root)
    encoded = label.encode("utf-8")
    if not encoded:
        raise ValueError("KDF label must be nonempty")
    if len(encoded) > MAX_KDF_LABEL:
        raise ValueError(f"KDF label longer than {MAX_KDF_LABEL} bytes")
    return hmac.new(root, encoded + b"\x00" + context, hashlib.sha256).digest()


def random_bytes(n: int) -> bytes:
    return os.urandom(n)


@dataclass(frozen=True)
class KeyPair:
    """X25519 key-agreement keypair, raw 32-byte encodings."""

    private: bytes
    public: bytes


def dh_generate() -> KeyPair:
    priv = x25519.X25519PrivateKey.generate()
    return KeyPair(
        private=priv.private_bytes_raw(),
        public=priv.public_key().public_bytes_raw(),
    )


def dh_shared(private: bytes, peer_public: bytes) -> bytes:
    """X25519 shared secret, 32 bytes. Raises ValueError on a bad peer key."""
    try:
        peer = x25519.X25519PublicKey.from_public_bytes(peer_public)
    except Exception as exc:
        raise ValueError(f"invalid peer public key: {exc}") from None
    return x25519.X25519PrivateKey.from_private_bytes(private).exchange(peer)


@dataclass(frozen=True)
class SigningKeyPair:
    """Ed25519 signing keypair, raw 32-byte encodings."""

    private: bytes
    public: bytes


def sign_generate() -> SigningKeyPair:
    priv = ed25519.Ed25519PrivateKey.generate()
    return SigningKeyPair(
        private=priv.private_bytes_raw(),
        public=priv.public_key().public_bytes_raw(),
    )


def sign(signing_key: bytes, message: bytes) -> bytes:
    """Ed25519 signature, 64 bytes."""
    return ed25519.Ed25519PrivateKey.from_private_bytes(signing_key).sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_SIZE:
        raise ValueError(f"signature must be {SIGNATURE_SIZE} bytes, got {len(signature)}")
    try:
        pub = ed25519.Ed25519PublicKey.from_public_bytes(public_key)
        pub.verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False
