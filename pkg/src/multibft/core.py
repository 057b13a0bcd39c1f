"""Core data model: objects, transaction DAGs, blocks, state vectors.

Transactions are small DAGs of single-object operations.  Vertex order in
the encoding is meaningful (edges refer to vertex indices), edge sets are
encoded sorted so the digest is canonical.  All value objects here are
frozen after construction and safe to share between simulated replicas.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field

from .codec import (
    Authenticator,
    Cursor,
    DecodeError,
    KeyRing,
    KIND_CLIENT,
    digest32,
    enc_bytes,
    enc_i64,
    enc_seq,
    enc_u32,
    enc_u64,
    enc_u8,
)

ObjectKey = bytes

I64_MIN = -(1 << 63)
I64_MAX = (1 << 63) - 1


class OpCode(enum.IntEnum):
    ADD = 0
    SUB = 1
    SET = 2


class TxStatus(enum.IntEnum):
    """Final client-visible outcome of one execution attempt."""

    SUCCESS = 0
    FAILURE = 1


class CycleError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectRecord:
    """A keyed signed 64-bit value, the unit of partitioning and locking."""

    key: ObjectKey
    value: int


@dataclass(frozen=True)
class Vertex:
    """One operation on one object.

    SUB carries an implicit guard (balance must cover the amount); an
    explicit min_balance guard may also be attached to any op.  The guard
    is checked against the object's value just before the op applies.
    """

    obj: ObjectKey
    op: OpCode
    amount: int
    min_balance: int | None = None
    owner_sig: Authenticator | None = None

    def signed_payload(self) -> bytes:
        body = enc_bytes(self.obj) + enc_u8(int(self.op)) + enc_i64(self.amount)
        if self.min_balance is None:
            body += enc_u8(0)
        else:
            body += enc_u8(1) + enc_i64(self.min_balance)
        return b"vertex:" + body

    def encode(self) -> bytes:
        body = enc_bytes(self.obj) + enc_u8(int(self.op)) + enc_i64(self.amount)
        if self.min_balance is None:
            body += enc_u8(0)
        else:
            body += enc_u8(1) + enc_i64(self.min_balance)
        if self.owner_sig is None:
            body += enc_u8(0)
        else:
            body += enc_u8(1) + self.owner_sig.encode()
        return body

    @classmethod
    def decode(cls, cur: Cursor) -> "Vertex":
        obj = cur.bytes_lp()
        op = OpCode(cur.u8())
        amount = cur.i64()
        min_balance = cur.i64() if cur.u8() else None
        sig = Authenticator.decode(cur) if cur.u8() else None
        return cls(obj, op, amount, min_balance, sig)


@dataclass(frozen=True)
class TransactionDag:
    """A transaction: vertices plus intra-tx dependency edges.

    ``tx_id`` is the digest of the canonical body and doubles as the
    dedup / ordering identity everywhere in the system.
    """

    tx_id: bytes
    vertices: tuple[Vertex, ...]
    edges: frozenset[tuple[int, int]]
    _body_cache: bytes | None = field(default=None, compare=False, repr=False)

    @staticmethod
    def body_encoding(vertices: tuple[Vertex, ...], edges: frozenset[tuple[int, int]]) -> bytes:
        vparts = [v.encode() for v in vertices]
        eparts = [enc_u32(a) + enc_u32(b) for a, b in sorted(edges)]
        return enc_seq(vparts) + enc_seq(eparts)

    @classmethod
    def build(cls, vertices: list[Vertex] | tuple[Vertex, ...],
              edges: set[tuple[int, int]] | frozenset[tuple[int, int]] = frozenset()) -> "TransactionDag":
        vs = tuple(vertices)
        es = frozenset(edges)
        body = cls.body_encoding(vs, es)
        return cls(digest32(body), vs, es, body)

    def body(self) -> bytes:
        cached = self._body_cache
        if cached is None:
            cached = self.body_encoding(self.vertices, self.edges)
            object.__setattr__(self, "_body_cache", cached)
        return cached

    def encode(self) -> bytes:
        body = self.body()
        return self.tx_id + enc_bytes(body)

    @classmethod
    def decode(cls, cur: Cursor) -> "TransactionDag":
        tx_id = cur.raw(32)
        body = cur.bytes_lp()
        inner = Cursor(body)
        nv = inner.u32()
        vertices = tuple(Vertex.decode(inner) for _ in range(nv))
        ne = inner.u32()
        edges = frozenset((inner.u32(), inner.u32()) for _ in range(ne))
        if not inner.done():
            raise DecodeError("trailing bytes in tx body")
        return cls(tx_id, vertices, edges, body)

    def objects(self) -> list[ObjectKey]:
        """Distinct objects touched, in first-appearance order."""
        seen: dict[ObjectKey, None] = {}
        for v in self.vertices:
            seen.setdefault(v.obj, None)
        return list(seen)


def tx_digest(tx: TransactionDag) -> bytes:
    """Digest of the canonical body; equal content gives equal digests."""
    return digest32(tx.body())


def toposort(tx: TransactionDag) -> list[int]:
    """Vertex indices in dependency order, ties broken by ascending index.

    Raises CycleError when the edge set is cyclic.
    """
    n = len(tx.vertices)
    indeg = [0] * n
    out: list[list[int]] = [[] for _ in range(n)]
    for a, b in tx.edges:
        indeg[b] += 1
        out[a].append(b)
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in sorted(out[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, j)
    if len(order) != n:
        raise CycleError("transaction edges contain a cycle")
    return order


def owner_of(key: ObjectKey, num_clients: int) -> int:
    """Deterministic object-to-owner assignment used by workload and validation."""
    from .codec import digest64_int

    return digest64_int(b"owner:" + key) % num_clients


def validate_tx(tx: TransactionDag, ring: KeyRing, num_clients: int) -> None:
    """Structural and authenticity checks; raises ValidationError.

    Checks: non-empty, edge indices in range, acyclic, amounts in the
    signed 64-bit domain, id matches the body digest, and every vertex
    carries a valid signature from its object's owner.
    """
    if not tx.vertices:
        raise ValidationError("empty transaction")
    n = len(tx.vertices)
    for a, b in tx.edges:
        if not (0 <= a < n and 0 <= b < n):
            raise ValidationError("edge index out of range")
        if a == b:
            raise ValidationError("self edge")
    try:
        toposort(tx)
    except CycleError as e:
        raise ValidationError(str(e)) from e
    for v in tx.vertices:
        if not (I64_MIN <= v.amount <= I64_MAX):
            raise ValidationError("amount outside i64")
        if v.op != OpCode.SET and v.amount < 0:
            raise ValidationError("negative amount")
        if v.min_balance is not None and not (I64_MIN <= v.min_balance <= I64_MAX):
            raise ValidationError("min_balance outside i64")
        if v.owner_sig is None:
            raise ValidationError("missing owner signature")
        owner = owner_of(v.obj, num_clients)
        if v.owner_sig.kind != KIND_CLIENT or v.owner_sig.party != owner:
            raise ValidationError("signature from wrong owner")
        if not ring.verify(v.owner_sig, v.signed_payload()):
            raise ValidationError("bad owner signature")
    if tx.tx_id != digest32(tx.body()):
        raise ValidationError("tx id does not match body digest")


def make_signed_tx(ring: KeyRing, num_clients: int,
                   specs: list[tuple[ObjectKey, OpCode, int, int | None]],
                   edges: set[tuple[int, int]] = frozenset()) -> TransactionDag:
    """Convenience constructor that signs each vertex with its owner's key."""
    vertices = []
    for obj, op, amount, min_balance in specs:
        bare = Vertex(obj, op, amount, min_balance)
        sig = ring.sign(KIND_CLIENT, owner_of(obj, num_clients), bare.signed_payload())
        vertices.append(Vertex(obj, op, amount, min_balance, sig))
    return TransactionDag.build(vertices, edges)


@dataclass(frozen=True)
class Block:
    """One slot of one instance's log: ordered txs plus leader signature."""

    instance: int
    sn: int
    txs: tuple[TransactionDag, ...]
    leader_sig: Authenticator | None = None
    _body_cache: bytes | None = field(default=None, compare=False, repr=False)

    @staticmethod
    def body_encoding(instance: int, sn: int, txs: tuple[TransactionDag, ...]) -> bytes:
        return enc_u32(instance) + enc_u64(sn) + enc_seq([enc_bytes(t.encode()) for t in txs])

    def body(self) -> bytes:
        cached = self._body_cache
        if cached is None:
            cached = self.body_encoding(self.instance, self.sn, self.txs)
            object.__setattr__(self, "_body_cache", cached)
        return cached

    def digest(self) -> bytes:
        return digest32(self.body())

    def encode(self) -> bytes:
        body = self.body()
        sig = self.leader_sig.encode() if self.leader_sig else b""
        return enc_bytes(body) + enc_u8(1 if self.leader_sig else 0) + sig

    @classmethod
    def decode(cls, cur: Cursor) -> "Block":
        body = cur.bytes_lp()
        sig = Authenticator.decode(cur) if cur.u8() else None
        inner = Cursor(body)
        instance = inner.u32()
        sn = inner.u64()
        ntx = inner.u32()
        txs = []
        for _ in range(ntx):
            txs.append(TransactionDag.decode(Cursor(inner.bytes_lp())))
        if not inner.done():
            raise DecodeError("trailing bytes in block body")
        return cls(instance, sn, tuple(txs), sig, body)


@dataclass(frozen=True)
class SystemState:
    """Per-instance delivered frontier; -1 marks an instance with nothing yet."""

    frontiers: tuple[int, ...]

    def encode(self) -> bytes:
        return enc_seq([enc_i64(f) for f in self.frontiers])

    def __str__(self):
        return "(" + ",".join(str(f) for f in self.frontiers) + ")"


def store_digest(store: dict[ObjectKey, int]) -> bytes:
    """Order-independent digest of an object store."""
    parts = [enc_bytes(k) + enc_i64(v) for k, v in sorted(store.items())]
    return digest32(b"store:" + enc_seq(parts))
