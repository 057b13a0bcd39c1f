"""Canonical byte encoding and keyed digests.

Every structure that crosses the simulated wire (or gets digested) is
encoded through the helpers here.  The format is deliberately dumb:
fixed-width little-endian integers, u32 length prefixes for variable
fields, u32 count prefixes for sequences, and a fixed field order per
structure.  Two encodings of equal values are equal bytes, which is what
makes digests and golden vectors stable.
"""

from __future__ import annotations

import hashlib
import struct

DIGEST_SIZE = 32
TAG_SIZE = 16
KEY_SIZE = 32

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")


def enc_u8(v: int) -> bytes:
    return _U8.pack(v)


def enc_u32(v: int) -> bytes:
    return _U32.pack(v)


def enc_u64(v: int) -> bytes:
    return _U64.pack(v)


def enc_i64(v: int) -> bytes:
    return _I64.pack(v)


def enc_bytes(b: bytes) -> bytes:
    """Length-prefixed byte string."""
    return _U32.pack(len(b)) + b


def enc_seq(items: list[bytes]) -> bytes:
    """Count-prefixed concatenation of already-encoded items."""
    return _U32.pack(len(items)) + b"".join(items)


class Cursor:
    """Sequential reader over an encoded buffer."""

    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def _take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError("truncated buffer")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def bytes_lp(self) -> bytes:
        return self._take(self.u32())

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def done(self) -> bool:
        return self.pos == len(self.buf)


class DecodeError(ValueError):
    pass


def digest32(payload: bytes) -> bytes:
    """Content digest used for tx ids, block digests, and store digests."""
    return hashlib.blake2b(payload, digest_size=DIGEST_SIZE).digest()


def digest64_int(payload: bytes) -> int:
    """64-bit non-cryptographic digest used by the object partitioner."""
    return int.from_bytes(
        hashlib.blake2b(payload, digest_size=8).digest(), "little"
    )


# --- authenticators -------------------------------------------------------
#
# Parties sign with a keyed digest rather than real asymmetric crypto.  The
# key ring derives one secret per (kind, id) from the scenario seed; inside
# the simulation everyone can look up everyone's key, so "verification" is
# recomputing the tag.  Unforgeability is a modeling assumption: test code
# that wants to forge must go through the ring explicitly.

KIND_REPLICA = 0
KIND_CLIENT = 1


class KeyRing:
    def __init__(self, seed: int):
        self._seed = seed
        self._cache: dict[tuple[int, int], bytes] = {}

    def key(self, kind: int, party: int) -> bytes:
        k = (kind, party)
        got = self._cache.get(k)
        if got is None:
            material = b"multibft-key" + enc_u64(self._seed) + enc_u8(kind) + enc_u32(party)
            got = hashlib.blake2b(material, digest_size=KEY_SIZE).digest()
            self._cache[k] = got
        return got

    def sign(self, kind: int, party: int, payload: bytes) -> "Authenticator":
        tag = hashlib.blake2b(
            payload, digest_size=TAG_SIZE, key=self.key(kind, party)
        ).digest()
        return Authenticator(kind, party, tag)

    def verify(self, auth: "Authenticator", payload: bytes) -> bool:
        expect = hashlib.blake2b(
            payload, digest_size=TAG_SIZE, key=self.key(auth.kind, auth.party)
        ).digest()
        return expect == auth.tag


class Authenticator:
    """Keyed-digest tag naming its signer.  Immutable."""

    __slots__ = ("kind", "party", "tag")

    def __init__(self, kind: int, party: int, tag: bytes):
        if len(tag) != TAG_SIZE:
            raise ValueError("bad tag length")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "party", party)
        object.__setattr__(self, "tag", tag)

    def __setattr__(self, *a):
        raise AttributeError("Authenticator is immutable")

    def __eq__(self, other):
        return (
            isinstance(other, Authenticator)
            and self.kind == other.kind
            and self.party == other.party
            and self.tag == other.tag
        )

    def __hash__(self):
        return hash((self.kind, self.party, self.tag))

    def __repr__(self):
        return f"Authenticator(kind={self.kind}, party={self.party}, tag={self.tag.hex()[:8]})"

    def encode(self) -> bytes:
        return enc_u8(self.kind) + enc_u32(self.party) + self.tag

    @classmethod
    def decode(cls, cur: Cursor) -> "Authenticator":
        kind = cur.u8()
        party = cur.u32()
        tag = cur.raw(TAG_SIZE)
        return cls(kind, party, tag)
