"""Pre-determined global ordering over the same per-instance logs.

Every (instance, sn) slot owns a fixed global index g = sn*m + instance,
so the m logs interleave round-robin into one total order.  A single
logical executor walks that order: a block executes only once every
earlier index is filled and executed, which is exactly what couples the
whole system to its slowest producer - the cursor parks at each missing
slot, and blocks that arrived long ago sit waiting behind the gap.
"""

from __future__ import annotations

from collections import deque

from .core import Block, TxStatus
from .execution import apply_tx


def global_index(instance: int, sn: int, m: int) -> int:
    return sn * m + instance


def slot_of(g: int, m: int) -> tuple[int, int]:
    """Inverse of global_index: g -> (instance, sn)."""
    return g % m, g // m


class GlobalLog:
    """Round-robin interleave of the instance logs, with an exec cursor."""

    def __init__(self, m: int):
        self.m = m
        self.filled: dict[int, Block] = {}
        self.exec_cursor = 0

    def fill(self, block: Block) -> None:
        g = global_index(block.instance, block.sn, self.m)
        # duplicate deliveries are idempotent, same as the instance logs
        self.filled.setdefault(g, block)

    def ready(self) -> Block | None:
        return self.filled.get(self.exec_cursor)

    def take_next(self) -> Block | None:
        """Pop the block at the cursor, advancing it; None on a gap."""
        block = self.filled.get(self.exec_cursor)
        if block is not None:
            self.exec_cursor += 1
        return block

    def gc_below(self, g_limit: int) -> None:
        for g in [g for g in self.filled if g < g_limit]:
            del self.filled[g]


def execute_next_global(glog: GlobalLog, store: dict[bytes, int]) -> str:
    """One synchronous cursor step: run the whole block at the cursor,
    or report the gap.  The timed path below models the same thing with
    simulated costs."""
    block = glog.take_next()
    if block is None:
        return "WAITING_GAP"
    for tx in block.txs:
        apply_tx(tx, store)
    return "EXECUTED"


class SerialExecutor:
    """Single-lane executor consuming GlobalLog slots in index order.

    Transactions are applied one at a time at vertex_cost_ms per vertex,
    so N unit txs take exactly N cost units of simulated time end to
    end.  on_done(tx, status, g, t_start, t_end) fires per transaction
    after its effects land, which makes the store at any callback a
    byte-exact prefix of the global order.
    """

    def __init__(self, glog: GlobalLog, store: dict[bytes, int], *,
                 vertex_cost_ms: float = 1.0, schedule=None, now=None,
                 on_done=None):
        self.glog = glog
        self.store = store
        self.vertex_cost_ms = vertex_cost_ms
        self.schedule = schedule if schedule is not None else (lambda d, fn: fn())
        self.now = now if now is not None else (lambda: 0.0)
        self.on_done = on_done
        self.queue: deque[tuple[object, int]] = deque()   # (tx, g)
        self.pending_by_g: dict[int, int] = {}
        self.running = False
        self.seen: set[bytes] = set()
        self.executed_count = 0
        self.failed_count = 0

    def pump(self) -> None:
        """Drain every ready slot into the work queue, then keep the
        executor lane busy.  A tx occupying two slots (re-proposed after
        a view change dropped the original) executes only at its first
        slot in global order, which is the same slot on every replica."""
        while True:
            g = self.glog.exec_cursor
            block = self.glog.take_next()
            if block is None:
                break
            todo = [tx for tx in block.txs if tx.tx_id not in self.seen]
            if todo:
                self.seen.update(tx.tx_id for tx in todo)
                self.pending_by_g[g] = len(todo)
                for tx in todo:
                    self.queue.append((tx, g))
        if not self.running and self.queue:
            self._start_next()

    def min_pending_g(self) -> int | None:
        """Lowest global index with unfinished work; None when drained."""
        if not self.pending_by_g:
            return None
        return min(self.pending_by_g)

    def _start_next(self) -> None:
        tx, g = self.queue.popleft()
        self.running = True
        start = self.now()
        cost = self.vertex_cost_ms * len(tx.vertices)
        self.schedule(cost, lambda: self._complete(tx, g, start))

    def _complete(self, tx, g: int, start: float) -> None:
        status = apply_tx(tx, self.store)
        self.executed_count += 1
        if status == TxStatus.FAILURE:
            self.failed_count += 1
        left = self.pending_by_g[g] - 1
        if left:
            self.pending_by_g[g] = left
        else:
            del self.pending_by_g[g]
        self.running = False
        if self.on_done:
            # the callback may pump more work in, which can itself
            # restart the lane; only start here if it did not
            self.on_done(tx, status, g, start, self.now())
        if not self.running and self.queue:
            self._start_next()
