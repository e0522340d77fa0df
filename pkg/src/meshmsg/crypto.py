"""Key-private signcryption over fixed 255-byte packets.

Packet layout (all fields fixed width)::

    kem_ct (33) | nonce (12) | body_ct (194) | tag (16)

``kem_ct`` is an ephemeral P-256 point. The x-coordinate is stored as-is; the
first byte carries the y parity in its low bit and seven random bits above it,
so that no byte position has a fixed value. ``body_ct`` is AES-256-GCM over
``sender_pk (33) | signature (64) | plaintext (97)`` with ``kem_ct`` bound as
associated data. The signature is deterministic ECDSA-P256 over
``sender_pk | plaintext`` in raw ``r | s`` form.

Group packets keep the same shape: the first 33 bytes are random and act as
the per-message salt for the subkey derived from the group key.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

PACKET_SIZE = 255
KEM_SIZE = 33
NONCE_SIZE = 12
TAG_SIZE = 16
PK_SIZE = 33
SIG_SIZE = 64
PLAINTEXT_SIZE = PACKET_SIZE - KEM_SIZE - NONCE_SIZE - TAG_SIZE - PK_SIZE - SIG_SIZE
BODY_SIZE = PK_SIZE + SIG_SIZE + PLAINTEXT_SIZE
SYM_KEY_SIZE = 32
GROUP_ID_SIZE = 8
# usable bytes after the 2-byte length prefix
MAX_TEXT = PLAINTEXT_SIZE - 2

assert PLAINTEXT_SIZE == 97

_CURVE = ec.SECP256R1()
_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
_SIGN_ALG = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
_VERIFY_ALG = ec.ECDSA(hashes.SHA256())
_KEM_INFO = b"meshmsg/kem/v1"
_GROUP_INFO = b"meshmsg/group/v1"
_GROUP_SIG_CONTEXT = b"meshmsg/group-sig/v1"


class PlaintextError(ValueError):
    """Plaintext has the wrong length or user text does not fit."""


def randbytes(rng, n: int) -> bytes:
    """``n`` bytes from ``rng`` (a numpy Generator) or from the OS if ``rng`` is None."""
    if rng is None:
        return os.urandom(n)
    return rng.bytes(n)


def _scalar_from(material: bytes) -> int:
    wide = int.from_bytes(hashlib.sha512(material).digest(), "big")
    return wide % (_ORDER - 1) + 1


def _encode_point(pub: ec.EllipticCurvePublicKey) -> bytes:
    return pub.public_bytes(serialization.Encoding.X962,
                            serialization.PublicFormat.CompressedPoint)


def _decode_point(data: bytes) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, bytes(data))


@dataclass(frozen=True)
class KeyPair:
    sk: bytes
    pk: bytes
    _priv: ec.EllipticCurvePrivateKey = field(repr=False, compare=False, hash=False)

    @classmethod
    def from_secret(cls, sk: bytes) -> "KeyPair":
        scalar = int.from_bytes(sk, "big")
        if not 0 < scalar < _ORDER:
            raise ValueError("secret scalar out of range")
        priv = ec.derive_private_key(scalar, _CURVE)
        return cls(bytes(sk), _encode_point(priv.public_key()), priv)

    def fingerprint(self) -> bytes:
        return pk_fingerprint(self.pk)


def pk_fingerprint(pk: bytes) -> bytes:
    """Short 8-byte reference to a public key, used where a full key does not fit."""
    return hashlib.sha256(b"meshmsg/fp" + pk).digest()[:8]


def keygen(seed=None) -> KeyPair:
    """Derive a keypair from ``seed`` (int or bytes); OS entropy when omitted."""
    if seed is None:
        seed = os.urandom(32)
    elif isinstance(seed, int):
        seed = seed.to_bytes((seed.bit_length() + 8) // 8, "big", signed=True)
    scalar = _scalar_from(b"meshmsg/keygen" + bytes(seed))
    return KeyPair.from_secret(scalar.to_bytes(32, "big"))


def keygen_rng(rng) -> KeyPair:
    return keygen(randbytes(rng, 32))


def pad(text: bytes) -> bytes:
    """Frame ``text`` into a PLAINTEXT_SIZE block: u16 little-endian length, text, zeros."""
    text = bytes(text)
    if len(text) > MAX_TEXT:
        raise PlaintextError(f"text is {len(text)} bytes, at most {MAX_TEXT} fit")
    return len(text).to_bytes(2, "little") + text + bytes(MAX_TEXT - len(text))


def unpad(block: bytes) -> Optional[bytes]:
    """Inverse of :func:`pad`; None when the length prefix is inconsistent."""
    if len(block) != PLAINTEXT_SIZE:
        return None
    n = int.from_bytes(block[:2], "little")
    if n > MAX_TEXT:
        return None
    return bytes(block[2:2 + n])


class Packet(NamedTuple):
    """Field view over the wire bytes of a packet."""
    kem_ct: bytes
    nonce: bytes
    body_ct: bytes
    tag: bytes

    @classmethod
    def parse(cls, data: bytes) -> "Packet":
        if len(data) != PACKET_SIZE:
            raise ValueError(f"packet must be {PACKET_SIZE} bytes, got {len(data)}")
        a = KEM_SIZE
        b = a + NONCE_SIZE
        c = b + BODY_SIZE
        return cls(data[:a], data[a:b], data[b:c], data[c:])

    def to_bytes(self) -> bytes:
        return self.kem_ct + self.nonce + self.body_ct + self.tag


def _sign(sender: KeyPair, message: bytes) -> bytes:
    r, s = decode_dss_signature(sender._priv.sign(message, _SIGN_ALG))
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def _verify(pub: ec.EllipticCurvePublicKey, sig: bytes, message: bytes) -> bool:
    r = int.from_bytes(sig[:32], "big")
    s = int.from_bytes(sig[32:], "big")
    if not (0 < r < _ORDER and 0 < s < _ORDER):
        # still spend the verification work on a fixed signature
        r, s = 1, 1
        ok = False
    else:
        ok = True
    try:
        pub.verify(encode_dss_signature(r, s), message, _VERIFY_ALG)
    except InvalidSignature:
        return False
    return ok


def _kdf(secret: bytes, info: bytes) -> bytes:
    return HKDF(hashes.SHA256(), SYM_KEY_SIZE, salt=None, info=info).derive(secret)


def _check_plaintext(m: bytes) -> bytes:
    m = bytes(m)
    if len(m) != PLAINTEXT_SIZE:
        raise PlaintextError(f"plaintext must be {PLAINTEXT_SIZE} bytes, got {len(m)}")
    return m


def _encapsulate(recipient_pk: bytes, rng) -> Tuple[bytes, bytes]:
    recipient = _decode_point(recipient_pk)
    scalar = _scalar_from(b"meshmsg/eph" + randbytes(rng, 32))
    eph = ec.derive_private_key(scalar, _CURVE)
    point = _encode_point(eph.public_key())
    parity = point[0] - 2
    mask = randbytes(rng, 1)[0] & 0xFE
    kem_ct = bytes([mask | parity]) + point[1:]
    key = _kdf(eph.exchange(ec.ECDH(), recipient), _KEM_INFO + kem_ct)
    return kem_ct, key


def signcrypt(sender: KeyPair, recipient_pk: bytes, m: bytes, rng=None) -> bytes:
    """Sign ``m`` as ``sender`` and encrypt it so only ``recipient_pk`` can open it."""
    m = _check_plaintext(m)
    kem_ct, key = _encapsulate(recipient_pk, rng)
    nonce = randbytes(rng, NONCE_SIZE)
    body = sender.pk + _sign(sender, sender.pk + m) + m
    ct = AESGCM(key).encrypt(nonce, body, kem_ct)
    return kem_ct + nonce + ct


# Precomputed material so every failure path still runs a full verification.
_FALLBACK_KEYS = keygen(b"meshmsg/fallback")
_FALLBACK_POINT = _FALLBACK_KEYS._priv.public_key()
_FALLBACK_M = bytes(PLAINTEXT_SIZE)
_FALLBACK_BODY = (_FALLBACK_KEYS.pk
                  + _sign(_FALLBACK_KEYS, _FALLBACK_KEYS.pk + _FALLBACK_M)
                  + _FALLBACK_M)


def _open_body(body: bytes, sig_context: bytes, ok: bool):
    sender_pk = body[:PK_SIZE]
    sig = body[PK_SIZE:PK_SIZE + SIG_SIZE]
    m = body[PK_SIZE + SIG_SIZE:]
    try:
        spub = _decode_point(sender_pk)
    except ValueError:
        spub = _FALLBACK_POINT
        ok = False
    ok = _verify(spub, sig, sig_context + sender_pk + m) and ok
    if not ok:
        return None
    return bytes(sender_pk), bytes(m)


def designcrypt(recipient: KeyPair, pkt: bytes):
    """Open a packet addressed to ``recipient``.

    Returns ``(sender_pk, plaintext)`` or None. Every failure path performs the
    same sequence of operations (point decode, ECDH, AEAD, signature check)
    before the single result branch.
    """
    pkt = bytes(pkt)
    if len(pkt) != PACKET_SIZE:
        return None
    ok = True
    kem_ct = pkt[:KEM_SIZE]
    nonce = pkt[KEM_SIZE:KEM_SIZE + NONCE_SIZE]
    ct = pkt[KEM_SIZE + NONCE_SIZE:]
    try:
        eph = _decode_point(bytes([2 + (kem_ct[0] & 1)]) + kem_ct[1:])
    except ValueError:
        eph = _FALLBACK_POINT
        ok = False
    key = _kdf(recipient._priv.exchange(ec.ECDH(), eph), _KEM_INFO + kem_ct)
    try:
        body = AESGCM(key).decrypt(nonce, ct, kem_ct)
    except InvalidTag:
        body = _FALLBACK_BODY
        ok = False
    return _open_body(body, b"", ok)


@dataclass(frozen=True)
class GroupKey:
    key: bytes
    group_id: bytes

    def __post_init__(self):
        if len(self.key) != SYM_KEY_SIZE or len(self.group_id) != GROUP_ID_SIZE:
            raise ValueError("group key must be 32 bytes and group id 8 bytes")


def new_group_key(rng=None) -> GroupKey:
    return GroupKey(randbytes(rng, SYM_KEY_SIZE), randbytes(rng, GROUP_ID_SIZE))


def _group_subkey(gk: GroupKey, salt: bytes) -> bytes:
    return _kdf(gk.key, _GROUP_INFO + gk.group_id + salt)


def group_signcrypt(sender: KeyPair, gk: GroupKey, m: bytes, rng=None) -> bytes:
    m = _check_plaintext(m)
    salt = randbytes(rng, KEM_SIZE)
    nonce = randbytes(rng, NONCE_SIZE)
    context = _GROUP_SIG_CONTEXT + gk.group_id
    body = sender.pk + _sign(sender, context + sender.pk + m) + m
    return salt + nonce + AESGCM(_group_subkey(gk, salt)).encrypt(nonce, body, salt)


def group_designcrypt(gk: GroupKey, pkt: bytes):
    pkt = bytes(pkt)
    if len(pkt) != PACKET_SIZE:
        return None
    salt = pkt[:KEM_SIZE]
    nonce = pkt[KEM_SIZE:KEM_SIZE + NONCE_SIZE]
    ok = True
    try:
        body = AESGCM(_group_subkey(gk, salt)).decrypt(nonce, pkt[KEM_SIZE + NONCE_SIZE:], salt)
    except InvalidTag:
        body = _FALLBACK_BODY
        ok = False
    return _open_body(body, _GROUP_SIG_CONTEXT + gk.group_id, ok)


def message_id(pkt: bytes) -> bytes:
    """SHA-256 of the full packet bytes."""
    return hashlib.sha256(pkt).digest()


class Suite:
    """Signcryption backend used by protocol nodes.

    Subclasses swap the primitive (opaque packets in large simulations,
    deliberately broken variants in security-game controls).
    """

    name = "p256-aesgcm-ecdsa"

    def signcrypt(self, sender, recipient_pk, m, rng=None):
        return signcrypt(sender, recipient_pk, m, rng)

    def designcrypt(self, recipient, pkt):
        return designcrypt(recipient, pkt)

    def group_signcrypt(self, sender, gk, m, rng=None):
        return group_signcrypt(sender, gk, m, rng)

    def group_designcrypt(self, gk, pkt):
        return group_designcrypt(gk, pkt)


class UnauthenticatedSuite(Suite):
    """Broken backend: ignores the AEAD tag and the signature.

    Decrypts with raw AES-CTR at the GCM counter offset, so bit flips in the
    ciphertext come through as flipped plaintext. Only for testing that the
    integrity game can detect a forgery.
    """

    name = "unauthenticated"

    def designcrypt(self, recipient, pkt):
        pkt = bytes(pkt)
        if len(pkt) != PACKET_SIZE:
            return None
        kem_ct = pkt[:KEM_SIZE]
        nonce = pkt[KEM_SIZE:KEM_SIZE + NONCE_SIZE]
        try:
            eph = _decode_point(bytes([2 + (kem_ct[0] & 1)]) + kem_ct[1:])
        except ValueError:
            return None
        key = _kdf(recipient._priv.exchange(ec.ECDH(), eph), _KEM_INFO + kem_ct)
        ctr = nonce + (2).to_bytes(4, "big")
        dec = Cipher(algorithms.AES(key), modes.CTR(ctr)).decryptor()
        body = dec.update(pkt[KEM_SIZE + NONCE_SIZE:-TAG_SIZE]) + dec.finalize()
        return bytes(body[:PK_SIZE]), bytes(body[PK_SIZE + SIG_SIZE:])


DEFAULT_SUITE = Suite()
