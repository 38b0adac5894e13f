"""Onion packaging of the secret key, certificates and whisper channels.

Two interchangeable public-key schemes are provided:

``TestScheme``
    A keyed byte permutation with 16-bit keys, 2-byte nonces and a 16-bit
    hash. Not secure; small enough that tests can enumerate whole spaces.
    The hash is a bijective 16-bit mixer on 2-byte inputs (so certificate
    commitments are perfectly binding over the nonce space) and the first two
    bytes of SHA-256 for anything else.

``RealScheme``
    X25519 key agreement + HKDF-SHA256 + AES-256-GCM (ECIES style), SHA-256
    commitments and 32-byte nonces.

Both draw all randomness from a caller-supplied ``random.Random`` so that a
seeded run is reproducible.

Serialized layer plaintext (all integers big-endian)::

    u16 len(holder) | holder (utf-8) | u16 len(nonce) | nonce
    | u8 kind (0 = inner layer, 1 = secret key) | u32 len(payload) | payload

Serialized package::

    b"ONI1" | u8 len(scheme tag) | scheme tag | u32 len(ciphertext) | ciphertext
"""

from __future__ import annotations

import abc
import functools
import hashlib
import random
import struct
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat


class DecryptFailure(Exception):
    pass


@dataclass(frozen=True)
class PublicKey:
    scheme: str
    material: bytes

    def hex(self) -> str:
        return self.material.hex()


@dataclass(frozen=True)
class PrivateKey:
    scheme: str
    material: bytes = b""

    def __repr__(self) -> str:
        return f"PrivateKey({self.scheme!r}, <redacted>)"


class KeyPair(NamedTuple):
    public: PublicKey
    private: PrivateKey


class Scheme(abc.ABC):
    tag: str
    nonce_size: int

    @abc.abstractmethod
    def generate_keypair(self, rng: random.Random) -> KeyPair: ...

    @abc.abstractmethod
    def encrypt(self, public: PublicKey, plaintext: bytes, rng: random.Random) -> bytes: ...

    @abc.abstractmethod
    def decrypt(self, private: PrivateKey, ciphertext: bytes) -> bytes: ...

    @abc.abstractmethod
    def hash(self, data: bytes) -> bytes: ...

    def _check(self, key) -> None:
        if key.scheme != self.tag:
            raise DecryptFailure(f"key for scheme {key.scheme!r} used with {self.tag!r}")


def mix16(x: int) -> int:
    """Bijective mixing of a 16-bit integer (odd multipliers and xorshifts)."""
    x = (x * 0x9E3B + 0x7F4A) & 0xFFFF
    x ^= x >> 7
    x = (x * 0xA5B5) & 0xFFFF
    x ^= x >> 9
    return x


@functools.lru_cache(maxsize=4096)
def _permutation(key: int) -> tuple[bytes, bytes]:
    table = list(range(256))
    random.Random(key).shuffle(table)
    inverse = [0] * 256
    for i, v in enumerate(table):
        inverse[v] = i
    return bytes(table), bytes(inverse)


class TestScheme(Scheme):
    __test__ = False  # keep pytest from collecting this class
    tag = "test"
    nonce_size = 2
    _MAGIC = b"T"

    def generate_keypair(self, rng):
        material = rng.randrange(1, 1 << 16).to_bytes(2, "big")
        return KeyPair(PublicKey(self.tag, material), PrivateKey(self.tag, material))

    def hash(self, data: bytes) -> bytes:
        if len(data) == 2:
            return mix16(int.from_bytes(data, "big")).to_bytes(2, "big")
        return hashlib.sha256(data).digest()[:2]

    def encrypt(self, public, plaintext, rng):
        self._check(public)
        table, _ = _permutation(int.from_bytes(public.material, "big"))
        body = (plaintext + hashlib.sha256(plaintext).digest()[:2]).translate(table)
        return self._MAGIC + public.material + body

    def decrypt(self, private, ciphertext):
        self._check(private)
        if len(ciphertext) < 5 or ciphertext[:1] != self._MAGIC:
            raise DecryptFailure("not a test-scheme ciphertext")
        if ciphertext[1:3] != private.material:
            raise DecryptFailure("ciphertext is addressed to another key")
        _, inverse = _permutation(int.from_bytes(private.material, "big"))
        body = ciphertext[3:].translate(inverse)
        plaintext, check = body[:-2], body[-2:]
        if hashlib.sha256(plaintext).digest()[:2] != check:
            raise DecryptFailure("corrupted ciphertext")
        return plaintext


class RealScheme(Scheme):
    tag = "real"
    nonce_size = 32
    _MAGIC = b"X"
    _INFO = b"timedrelease onion layer v1"

    def generate_keypair(self, rng):
        priv = rng.randbytes(32)
        pub = X25519PrivateKey.from_private_bytes(priv).public_key()
        return KeyPair(PublicKey(self.tag, pub.public_bytes(Encoding.Raw, PublicFormat.Raw)),
                       PrivateKey(self.tag, priv))

    def hash(self, data: bytes) -> bytes:
        return hashlib.sha256(data).digest()

    def _key(self, shared: bytes, eph: bytes, receiver: bytes) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                    info=self._INFO + eph + receiver).derive(shared)

    def encrypt(self, public, plaintext, rng):
        self._check(public)
        eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        shared = eph.exchange(X25519PublicKey.from_public_bytes(public.material))
        nonce = rng.randbytes(12)
        ct = AESGCM(self._key(shared, eph_pub, public.material)).encrypt(nonce, plaintext, eph_pub)
        return self._MAGIC + eph_pub + nonce + ct

    def decrypt(self, private, ciphertext):
        self._check(private)
        if len(ciphertext) < 1 + 32 + 12 + 16 or ciphertext[:1] != self._MAGIC:
            raise DecryptFailure("not a real-scheme ciphertext")
        eph_pub, nonce, ct = ciphertext[1:33], ciphertext[33:45], ciphertext[45:]
        priv = X25519PrivateKey.from_private_bytes(private.material)
        own_pub = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        try:
            return AESGCM(self._key(shared, eph_pub, own_pub)).decrypt(nonce, ct, eph_pub)
        except InvalidTag:
            raise DecryptFailure("authentication failed") from None


SCHEMES: dict[str, Scheme] = {"test": TestScheme(), "real": RealScheme()}


def get_scheme(tag: str) -> Scheme:
    try:
        return SCHEMES[tag]
    except KeyError:
        raise ValueError(f"unknown scheme {tag!r}; choose from {sorted(SCHEMES)}") from None


# -- certificates --------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    holder: str
    nonce: bytes
    commitment: bytes


def verify_certificate(nonce: bytes, commitment: bytes, scheme: Scheme) -> bool:
    return scheme.hash(nonce) == commitment


# -- onion ---------------------------------------------------------------------

_KIND_LAYER = 0
_KIND_SECRET = 1


@dataclass(frozen=True)
class OnionPackage:
    scheme: str
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        tag = self.scheme.encode()
        return b"ONI1" + struct.pack(">B", len(tag)) + tag + struct.pack(">I", len(self.ciphertext)) + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "OnionPackage":
        try:
            if data[:4] != b"ONI1":
                raise ValueError("bad magic")
            n = data[4]
            tag = data[5:5 + n].decode()
            (size,) = struct.unpack(">I", data[5 + n:9 + n])
            body = data[9 + n:]
            if len(body) != size:
                raise ValueError("length mismatch")
        except (IndexError, struct.error, UnicodeDecodeError, ValueError) as exc:
            raise DecryptFailure(f"malformed package: {exc}") from None
        return cls(tag, body)


def _pack_layer(cert: Certificate, kind: int, payload: bytes) -> bytes:
    holder = cert.holder.encode()
    return (struct.pack(">H", len(holder)) + holder
            + struct.pack(">H", len(cert.nonce)) + cert.nonce
            + struct.pack(">BI", kind, len(payload)) + payload)


def _unpack_layer(data: bytes, scheme: Scheme) -> tuple[Certificate, int, bytes]:
    try:
        (n,) = struct.unpack_from(">H", data, 0)
        holder = data[2:2 + n].decode()
        off = 2 + n
        (m,) = struct.unpack_from(">H", data, off)
        nonce = data[off + 2:off + 2 + m]
        off += 2 + m
        kind, size = struct.unpack_from(">BI", data, off)
        payload = data[off + 5:]
    except (struct.error, UnicodeDecodeError) as exc:
        raise DecryptFailure(f"malformed layer: {exc}") from None
    if len(payload) != size or len(nonce) != m or kind not in (_KIND_LAYER, _KIND_SECRET):
        raise DecryptFailure("malformed layer")
    return Certificate(holder, nonce, scheme.hash(nonce)), kind, payload


class OnionBuild(NamedTuple):
    package: OnionPackage
    certificates: list[Certificate]
    innermost_hash: bytes


def make_certificates(holders: Sequence[str], scheme: Scheme, rng: random.Random) -> list[Certificate]:
    """One certificate per holder with pairwise distinct nonces."""
    seen: set[bytes] = set()
    certs = []
    for holder in holders:
        nonce = rng.randbytes(scheme.nonce_size)
        while nonce in seen:
            nonce = rng.randbytes(scheme.nonce_size)
        seen.add(nonce)
        certs.append(Certificate(holder, nonce, scheme.hash(nonce)))
    return certs


def build_onion(secret_key: bytes, route: Sequence[tuple[str, PublicKey]],
                recipient: tuple[str, PublicKey], scheme: Scheme,
                rng: random.Random) -> OnionBuild:
    """Wrap ``secret_key`` for the recipient, then once per hop from last to first.

    Certificates are returned in path order (route hops first, recipient last).
    The third element is the hash of the recipient-only ciphertext, the
    commitment that release-ahead evidence is checked against.
    """
    hops = list(route) + [recipient]
    certs = make_certificates([h for h, _ in hops], scheme, rng)
    inner = scheme.encrypt(recipient[1], _pack_layer(certs[-1], _KIND_SECRET, secret_key), rng)
    innermost_hash = scheme.hash(inner)
    for (_, pub), cert in zip(reversed(route), reversed(certs[:-1])):
        inner = scheme.encrypt(pub, _pack_layer(cert, _KIND_LAYER, inner), rng)
    return OnionBuild(OnionPackage(scheme.tag, inner), certs, innermost_hash)


def peel(package: OnionPackage, private: PrivateKey, scheme: Scheme) -> tuple[Certificate, OnionPackage | bytes]:
    """Decrypt one layer. Returns the embedded certificate and either the next
    package or, at the innermost layer, the plaintext secret key."""
    if package.scheme != scheme.tag:
        raise DecryptFailure(f"package built with {package.scheme!r}")
    cert, kind, payload = _unpack_layer(scheme.decrypt(private, package.ciphertext), scheme)
    if kind == _KIND_SECRET:
        return cert, payload
    return cert, OnionPackage(scheme.tag, payload)


# -- whisper -------------------------------------------------------------------

@dataclass(frozen=True)
class WhisperEnvelope:
    receiver: str
    sealed: bytes


def seal_whisper_key(channel_key: bytes, receiver: str, public: PublicKey,
                     scheme: Scheme, rng: random.Random) -> WhisperEnvelope:
    return WhisperEnvelope(receiver, scheme.encrypt(public, channel_key, rng))


def open_whisper_key(envelope: WhisperEnvelope, private: PrivateKey, scheme: Scheme) -> bytes:
    return scheme.decrypt(private, envelope.sealed)


class WhisperNetwork:
    """In-process reliable queues addressed by channel key."""

    def __init__(self):
        self._queues: dict[bytes, deque] = defaultdict(deque)

    def post(self, channel_key: bytes, message) -> None:
        self._queues[channel_key].append(message)

    def fetch(self, channel_key: bytes):
        q = self._queues.get(channel_key)
        if not q:
            return None
        return q.popleft()
