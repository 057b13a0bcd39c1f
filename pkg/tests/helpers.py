"""Shared test fixtures: deterministic keys per instance, signed txs, blocks."""

import heapq

from multibft.codec import KeyRing
from multibft.core import Block, OpCode, TransactionDag, make_signed_tx
from multibft.partition import assign

NUM_CLIENTS = 4


class FakeLoop:
    """Minimal event loop: schedule(delay, fn) plus run-to-empty."""

    def __init__(self):
        self.now = 0.0
        self._heap = []
        self._seq = 0

    def schedule(self, delay, fn):
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay, self._seq, fn))

    def run(self, until=None):
        while self._heap:
            if until is not None and self._heap[0][0] > until:
                break
            t, _, fn = heapq.heappop(self._heap)
            self.now = t
            fn()
        if until is not None:
            self.now = max(self.now, until)


def key_for_instance(m: int, instance: int, salt: int = 0) -> bytes:
    """Find a key whose partition is the requested instance."""
    n = 0
    found = 0
    while True:
        key = b"k%d-%d" % (m, n)
        if assign(key, m) == instance:
            if found == salt:
                return key
            found += 1
        n += 1


def signed_transfer(ring: KeyRing, src: bytes, dst: bytes, amount: int = 1) -> TransactionDag:
    return make_signed_tx(
        ring,
        NUM_CLIENTS,
        [(src, OpCode.SUB, amount, None), (dst, OpCode.ADD, amount, None)],
        {(0, 1)},
    )


def signed_add(ring: KeyRing, key: bytes, amount: int = 1) -> TransactionDag:
    return make_signed_tx(ring, NUM_CLIENTS, [(key, OpCode.ADD, amount, None)])


def block(instance: int, sn: int, txs) -> Block:
    return Block(instance, sn, tuple(txs))
