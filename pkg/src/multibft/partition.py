"""Object-to-instance partitioning and per-instance tx buckets.

Every object key maps to exactly one ordering instance via a 64-bit
digest mod m.  A transaction is routed into the bucket of every instance
that owns one of its objects; a tx touching a single instance is an
intra-instance tx, anything else is cross-instance.
"""

from __future__ import annotations

from collections import deque

from .codec import digest64_int
from .core import ObjectKey, TransactionDag


def assign(key: ObjectKey, m: int) -> int:
    """Owning instance for an object key.  Pure and stable."""
    return digest64_int(key) % m


def instances_of(tx: TransactionDag, m: int) -> tuple[int, ...]:
    """Sorted distinct instances a tx touches."""
    return tuple(sorted({assign(v.obj, m) for v in tx.vertices}))


class Bucket:
    """FIFO of tx digests awaiting proposal by one instance's leader.

    Reinjected digests (aborted txs being retried) queue ahead of fresh
    ones.  The seen set deduplicates routing: a digest is only admitted
    once per life cycle; reinjection re-arms it explicitly.
    """

    def __init__(self, instance: int):
        self.instance = instance
        self.fresh: deque[bytes] = deque()
        self.retry: deque[bytes] = deque()
        self.seen: set[bytes] = set()

    def __len__(self) -> int:
        return len(self.fresh) + len(self.retry)

    def offer(self, digest: bytes) -> bool:
        """Queue a digest unless already seen.  Returns whether queued."""
        if digest in self.seen:
            return False
        self.seen.add(digest)
        self.fresh.append(digest)
        return True

    def reinject(self, digest: bytes) -> None:
        """Re-queue an aborted tx ahead of fresh traffic."""
        self.seen.add(digest)
        self.retry.append(digest)

    def pull(self, max_batch: int) -> list[bytes]:
        """Dequeue up to max_batch digests, retries first."""
        out: list[bytes] = []
        while self.retry and len(out) < max_batch:
            out.append(self.retry.popleft())
        while self.fresh and len(out) < max_batch:
            out.append(self.fresh.popleft())
        return out

    def forget(self, digest: bytes) -> None:
        """Drop a digest from the dedup window (checkpoint GC)."""
        self.seen.discard(digest)


class Router:
    """Routes validated txs into the buckets of their instances."""

    def __init__(self, m: int):
        self.m = m
        self.buckets = [Bucket(i) for i in range(m)]

    def route_tx(self, tx: TransactionDag) -> tuple[int, ...]:
        """Queue tx in every involved instance's bucket; idempotent.

        Returns the involved instances (empty tuple when the digest was
        already routed, in which case nothing changed).
        """
        ins = instances_of(tx, self.m)
        changed = False
        for i in ins:
            changed |= self.buckets[i].offer(tx.tx_id)
        return ins if changed else ()
