"""Cryptographic primitives for the ballot protocol.

Plain signatures are RSA PKCS#1 v1.5 over SHA-256 (deterministic padding).
Blind signatures use the raw homomorphic RSA form on a full-entropy digest:
the requester blinds H(m) with a fresh factor, the signer exponentiates
without learning H(m), and the requester strips the factor to recover an
ordinary signature. Envelopes sign-then-encrypt: the payload plus its
signature are encrypted under a fresh AES-256-GCM session key, which is in
turn encapsulated to the recipient's RSA key with OAEP.
"""

from __future__ import annotations

import hashlib
import json
import math
import secrets
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

SUPPORTED_KEY_BITS = (2048, 3072)
SESSION_KEY_BYTES = 32
GCM_NONCE_BYTES = 12
MIN_RANDOM_BITS = 64


class CryptoError(Exception):
    """Base error for envelope and signature failures."""


class DecryptionFailed(CryptoError):
    """Envelope could not be opened with the given recipient key."""


class SignatureInvalid(CryptoError):
    """Inner signature missing, malformed, or not by the expected signer."""


@dataclass(frozen=True)
class Digest:
    """A SHA-256 digest with its algorithm label."""

    value: bytes
    algorithm: str = "sha-256"

    def __post_init__(self) -> None:
        if len(self.value) != 32:
            raise ValueError(f"digest value must be 32 bytes, got {len(self.value)}")

    @property
    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        return cls(value=bytes.fromhex(text))


def digest(data: bytes) -> Digest:
    """SHA-256 of the given bytes."""
    return Digest(value=hashlib.sha256(data).digest())


def random_string(bits: int) -> bytes:
    """Cryptographically strong random bytes; bits must be a multiple of 8 and >= 64."""
    if bits % 8 != 0 or bits < MIN_RANDOM_BITS:
        raise ValueError(f"bits must be a multiple of 8 and >= {MIN_RANDOM_BITS}, got {bits}")
    return secrets.token_bytes(bits // 8)


def int_to_hex(value: int) -> str:
    """Protocol rendering of big integers: lowercase hex, no leading zeros."""
    if value < 0:
        raise ValueError("negative integers have no protocol rendering")
    return format(value, "x")


def hex_to_int(text: str) -> int:
    return int(text, 16)


class PublicKey:
    """An RSA public half: verification, sealing target, stable key-id."""

    def __init__(self, key: rsa.RSAPublicKey):
        self._key = key

    @property
    def raw(self) -> rsa.RSAPublicKey:
        return self._key

    @property
    def numbers(self) -> rsa.RSAPublicNumbers:
        return self._key.public_numbers()

    def der(self) -> bytes:
        return self._key.public_bytes(
            encoding=serialization.Encoding.DER,
            format=serialization.PublicFormat.SubjectPublicKeyInfo,
        )

    def pem(self) -> bytes:
        return self._key.public_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PublicFormat.SubjectPublicKeyInfo,
        )

    @property
    def key_id(self) -> str:
        return hashlib.sha256(self.der()).hexdigest()[:8]

    def verify(self, message: bytes, signature: bytes) -> bool:
        try:
            self._key.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
            return True
        except InvalidSignature:
            return False

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(self.pem())

    @classmethod
    def load(cls, path: Path | str) -> "PublicKey":
        return cls.from_pem(Path(path).read_bytes())

    @classmethod
    def from_pem(cls, pem: bytes) -> "PublicKey":
        key = serialization.load_pem_public_key(pem)
        if not isinstance(key, rsa.RSAPublicKey):
            raise ValueError("not an RSA public key")
        return cls(key)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PublicKey) and self.der() == other.der()


class KeyPair:
    """An RSA keypair bound to a role label, usable for both sign and seal."""

    def __init__(self, role: str, private: rsa.RSAPrivateKey):
        self.role = role
        self._private = private
        self.public = PublicKey(private.public_key())

    @property
    def key_id(self) -> str:
        return self.public.key_id

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message, padding.PKCS1v15(), hashes.SHA256())

    def private_numbers(self) -> rsa.RSAPrivateNumbers:
        return self._private.private_numbers()

    def private_pem(self) -> bytes:
        return self._private.private_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(self.private_pem())

    @classmethod
    def load(cls, path: Path | str, role: str = "") -> "KeyPair":
        key = serialization.load_pem_private_key(Path(path).read_bytes(), password=None)
        if not isinstance(key, rsa.RSAPrivateKey):
            raise ValueError("not an RSA private key")
        return cls(role or Path(path).stem, key)


def generate_keypair(role: str, bits: int = 2048) -> KeyPair:
    """Fresh RSA keypair for a protocol role."""
    if bits not in SUPPORTED_KEY_BITS:
        raise ValueError(f"unsupported key size {bits}; supported: {SUPPORTED_KEY_BITS}")
    return KeyPair(role, rsa.generate_private_key(public_exponent=65537, key_size=bits))


def sign(message: bytes, key: KeyPair) -> bytes:
    return key.sign(message)


def verify(message: bytes, signature: bytes, public: PublicKey) -> bool:
    return public.verify(message, signature)


@dataclass(frozen=True)
class SealedEnvelope:
    """Sign-then-encrypt envelope; the signature travels inside the ciphertext.

    ciphertext = GCM nonce || AES-256-GCM(inner), where inner carries the
    payload, its signature, and the signer's public key. The session key is
    encapsulated to the recipient with RSA-OAEP.
    """

    recipient_key_id: str
    sender_key_id: str
    encapsulated_key: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        body = {
            "ciphertext": self.ciphertext.hex(),
            "encapsulated_key": self.encapsulated_key.hex(),
            "recipient_key_id": self.recipient_key_id,
            "sender_key_id": self.sender_key_id,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SealedEnvelope":
        try:
            body = json.loads(blob.decode("utf-8"))
            return cls(
                recipient_key_id=body["recipient_key_id"],
                sender_key_id=body["sender_key_id"],
                encapsulated_key=bytes.fromhex(body["encapsulated_key"]),
                ciphertext=bytes.fromhex(body["ciphertext"]),
            )
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise DecryptionFailed(f"malformed envelope: {exc}") from exc


def seal(payload: bytes, signer: KeyPair, recipient: PublicKey) -> SealedEnvelope:
    """Sign payload with signer's key, then encrypt payload+signature to recipient."""
    inner = json.dumps(
        {
            "payload": payload.hex(),
            "signature": signer.sign(payload).hex(),
            "signer_pem": signer.public.pem().decode("ascii"),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    session_key = secrets.token_bytes(SESSION_KEY_BYTES)
    nonce = secrets.token_bytes(GCM_NONCE_BYTES)
    ciphertext = nonce + AESGCM(session_key).encrypt(nonce, inner, None)
    encapsulated = recipient.raw.encrypt(
        session_key,
        padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None),
    )
    return SealedEnvelope(
        recipient_key_id=recipient.key_id,
        sender_key_id=signer.key_id,
        encapsulated_key=encapsulated,
        ciphertext=ciphertext,
    )


def open_envelope(
    envelope: SealedEnvelope,
    recipient: KeyPair,
    expected_signer: Optional[PublicKey] = None,
) -> bytes:
    """Decrypt an envelope and verify the inner signature.

    When expected_signer is given, the embedded signer key must match it
    exactly; otherwise the embedded key is used for verification only
    (anonymous-sender envelopes, used by the blind flow).
    """
    try:
        session_key = recipient._private.decrypt(
            envelope.encapsulated_key,
            padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None),
        )
        nonce, body = envelope.ciphertext[:GCM_NONCE_BYTES], envelope.ciphertext[GCM_NONCE_BYTES:]
        inner = AESGCM(session_key).decrypt(nonce, body, None)
    except Exception as exc:
        raise DecryptionFailed("envelope decryption failed") from exc
    try:
        fields = json.loads(inner.decode("utf-8"))
        payload = bytes.fromhex(fields["payload"])
        signature = bytes.fromhex(fields["signature"])
        signer = PublicKey.from_pem(fields["signer_pem"].encode("ascii"))
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise SignatureInvalid(f"malformed inner plaintext: {exc}") from exc
    if expected_signer is not None and signer != expected_signer:
        raise SignatureInvalid("envelope signer does not match the expected key")
    if not signer.verify(payload, signature):
        raise SignatureInvalid("inner signature verification failed")
    return payload


@dataclass(frozen=True)
class BlindingContext:
    """Client-side state of one blinding: what was sent and how to strip r."""

    blinded_message: int
    unblinding_factor: int  # r^-1 mod n
    modulus: int
    public_exponent: int
    message_int: int  # H(m) as an integer, the value the final signature must open to


def blind(message_digest: Digest, signer_public: PublicKey, _fixed_r: Optional[int] = None) -> BlindingContext:
    """Blind H(m) with a fresh factor coprime to the signer modulus.

    _fixed_r pins the blinding factor for tests (r=1 makes blinding the identity).
    """
    numbers = signer_public.numbers
    n, e = numbers.n, numbers.e
    m = int.from_bytes(message_digest.value, "big") % n
    while True:
        r = _fixed_r if _fixed_r is not None else secrets.randbelow(n - 2) + 2
        if math.gcd(r, n) == 1:
            break
        if _fixed_r is not None:
            raise ValueError("fixed blinding factor is not coprime to the modulus")
    return BlindingContext(
        blinded_message=(m * pow(r, e, n)) % n,
        unblinding_factor=pow(r, -1, n),
        modulus=n,
        public_exponent=e,
        message_int=m,
    )


def blind_sign(blinded_message: int, key: KeyPair) -> int:
    """Raw RSA signature on a blinded value: blinded^d mod n."""
    numbers = key.private_numbers()
    return pow(blinded_message, numbers.d, numbers.public_numbers.n)


def unblind(blinded_signature: int, ctx: BlindingContext) -> int:
    """Strip the blinding factor and check the result opens to H(m)."""
    signature = (blinded_signature * ctx.unblinding_factor) % ctx.modulus
    if pow(signature, ctx.public_exponent, ctx.modulus) != ctx.message_int:
        raise SignatureInvalid("unblinded signature does not verify; context mismatch?")
    return signature


def verify_blind_signature(signature: int, message_digest: Digest, signer_public: PublicKey) -> bool:
    """Check a raw RSA signature on a digest: sig^e mod n == H(m) mod n."""
    numbers = signer_public.numbers
    m = int.from_bytes(message_digest.value, "big") % numbers.n
    return pow(signature, numbers.e, numbers.n) == m
