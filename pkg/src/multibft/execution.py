"""Lock-based parallel execution over the per-instance logs.

Each instance advances strictly head-of-line: the earliest live entry
must execute or abort before anything behind it is considered.  When an
instance's cursor reaches a tx it takes the locks of that tx's objects
owned by the instance; a cross-instance tx therefore executes exactly
once, at the moment every involved instance has walked up to it.  The
object store only ever changes by whole transactions: vertices apply in
dependency order and any guard failure rolls the whole tx back through
the undo log.

Execution occupies one of a fixed number of simulated executor slots for
(vertex count x unit cost) simulated milliseconds, so N pairwise
disjoint unit txs on k slots finish in ceil(N/k) cost units, and a
serial baseline takes N units.
"""

from __future__ import annotations

import enum
from collections import deque

from .core import I64_MAX, I64_MIN, OpCode, TxStatus, toposort
from .orderer import Orderer, Phase, TxRecord
from .partition import assign


class ExecOutcome(enum.Enum):
    EXECUTED = "EXECUTED"
    BLOCKED = "BLOCKED"
    IDLE = "IDLE"


class LockTable:
    """One holder per object plus a FIFO waiter queue."""

    def __init__(self):
        self.holders: dict[bytes, bytes] = {}
        self.waiters: dict[bytes, deque[bytes]] = {}

    def holder(self, key: bytes) -> bytes | None:
        return self.holders.get(key)

    def acquire(self, key: bytes, digest: bytes) -> bool:
        cur = self.holders.get(key)
        if cur is None:
            self.holders[key] = digest
            return True
        if cur == digest:
            return True
        q = self.waiters.setdefault(key, deque())
        if digest not in q:
            q.append(digest)
        return False

    def release_all(self, digest: bytes) -> list[tuple[bytes, bytes]]:
        """Release every lock held by digest; FIFO-grant waiters.
        Returns (key, new_holder) for each handover."""
        grants = []
        for key in [k for k, h in self.holders.items() if h == digest]:
            q = self.waiters.get(key)
            if q:
                nxt = q.popleft()
                self.holders[key] = nxt
                grants.append((key, nxt))
                if not q:
                    del self.waiters[key]
            else:
                del self.holders[key]
        # drop any queued waits by this digest (abort path)
        for key in list(self.waiters):
            q = self.waiters[key]
            if digest in q:
                q.remove(digest)
                if not q:
                    del self.waiters[key]
        return grants


class UndoLog:
    """Before-images for one tx attempt, applied in reverse on rollback."""

    def __init__(self):
        self.entries: list[tuple[bytes, int]] = []

    def record(self, key: bytes, old_value: int) -> None:
        self.entries.append((key, old_value))

    def rollback(self, store: dict[bytes, int]) -> None:
        for key, old in reversed(self.entries):
            store[key] = old
        self.entries.clear()


def apply_tx_traced(tx, store: dict[bytes, int]) -> tuple[TxStatus, list[tuple[bytes, int]]]:
    """Apply a transaction's vertices in dependency order; all or nothing.

    Guards are checked against the object's current value just before
    each op: SUB requires value >= amount, an explicit min_balance
    requires value >= min_balance, and any result outside the signed
    64-bit domain fails the tx.

    Returns the status and, on success, the before-images of every write
    in application order (empty on failure, which leaves no net writes).
    """
    undo = UndoLog()
    for idx in toposort(tx):
        v = tx.vertices[idx]
        cur = store.get(v.obj, 0)
        if v.min_balance is not None and cur < v.min_balance:
            undo.rollback(store)
            return TxStatus.FAILURE, []
        if v.op == OpCode.SUB and cur < v.amount:
            undo.rollback(store)
            return TxStatus.FAILURE, []
        if v.op == OpCode.ADD:
            new = cur + v.amount
        elif v.op == OpCode.SUB:
            new = cur - v.amount
        else:
            new = v.amount
        if not (I64_MIN <= new <= I64_MAX):
            undo.rollback(store)
            return TxStatus.FAILURE, []
        undo.record(v.obj, cur)
        store[v.obj] = new
    return TxStatus.SUCCESS, undo.entries


def apply_tx(tx, store: dict[bytes, int]) -> TxStatus:
    return apply_tx_traced(tx, store)[0]


class ExecutionEngine:
    """Drives lock acquisition and slot-scheduled execution for one replica."""

    def __init__(self, orderer: Orderer, store: dict[bytes, int], *,
                 slots: int = 8, vertex_cost_ms: float = 1.0,
                 schedule=None, now=None, on_done=None, on_effects=None):
        self.orderer = orderer
        self.store = store
        self.locks = LockTable()
        self.slots = slots
        self.vertex_cost_ms = vertex_cost_ms
        self.schedule = schedule if schedule is not None else (lambda d, fn: fn())
        self.now = now if now is not None else (lambda: 0.0)
        self.on_done = on_done        # fn(rec, status, exec_start, exec_end)
        self.on_effects = on_effects  # fn(rec, before_images) on success
        self.held: dict[bytes, set[bytes]] = {}
        self.ready: deque[TxRecord] = deque()
        self.running = 0
        self.active_by_epoch: dict[int, int] = {}   # dispatched, not yet done
        self.executed_count = 0
        self.failed_count = 0
        self.exec_history: list[tuple[bytes, TxStatus]] = []   # completion order, for audits

    # -- lock helpers ------------------------------------------------------

    def _objects_for_instance(self, rec: TxRecord, instance: int) -> list[bytes]:
        keys = {v.obj for v in rec.tx.vertices if assign(v.obj, self.orderer.m) == instance}
        return sorted(keys)

    def _all_objects(self, rec: TxRecord) -> list[bytes]:
        return rec.tx.objects()

    def holds_all(self, rec: TxRecord) -> bool:
        held = self.held.get(rec.digest, set())
        return all(o in held for o in self._all_objects(rec))

    # -- main advance loop -------------------------------------------------

    def try_advance(self, instance: int) -> ExecOutcome:
        """Push one instance forward: take the head tx's local locks and
        execute it once it holds everything it needs."""
        rec = self.orderer.first_pending(instance)
        if rec is None:
            return ExecOutcome.IDLE
        held = self.held.setdefault(rec.digest, set())
        blocked = False
        for obj in self._objects_for_instance(rec, instance):
            if obj in held:
                continue
            if self.locks.acquire(obj, rec.digest):
                held.add(obj)
            else:
                blocked = True
        if blocked or not self.holds_all(rec):
            return ExecOutcome.BLOCKED
        self._dispatch(rec)
        return ExecOutcome.EXECUTED

    def pump(self) -> None:
        """Advance every instance to a fixed point (dispatches included)."""
        progressed = True
        while progressed:
            progressed = False
            for i in range(self.orderer.m):
                if self.try_advance(i) == ExecOutcome.EXECUTED:
                    progressed = True

    def busy(self) -> bool:
        return self.running > 0 or bool(self.ready)

    def active_at_or_below(self, epoch: int) -> bool:
        """Any dispatched-but-unfinished tx belonging to windows <= epoch."""
        return any(e <= epoch for e in self.active_by_epoch)

    # -- slot scheduling ---------------------------------------------------

    def _dispatch(self, rec: TxRecord) -> None:
        # The tx owns every lock it needs, so nothing behind it can touch
        # its objects: move the cursors past it now and let it run (or wait
        # for a slot) off to the side.  This is what lets k slots drain k
        # disjoint txs from one log concurrently.
        rec.phase = Phase.EXECUTING
        self.orderer.consume(rec)
        self.active_by_epoch[rec.done_epoch] = self.active_by_epoch.get(rec.done_epoch, 0) + 1
        if self.running < self.slots:
            self._start(rec)
        else:
            self.ready.append(rec)

    def _start(self, rec: TxRecord) -> None:
        self.running += 1
        start = self.now()
        cost = self.vertex_cost_ms * len(rec.tx.vertices)
        self.schedule(cost, lambda: self._complete(rec, start))

    def _complete(self, rec: TxRecord, exec_start: float) -> None:
        status, before_images = apply_tx_traced(rec.tx, self.store)
        rec.phase = Phase.DONE
        rec.result = status
        self.executed_count += 1
        if status == TxStatus.FAILURE:
            self.failed_count += 1
        self.exec_history.append((rec.digest, status))
        if self.on_effects and before_images:
            self.on_effects(rec, before_images)
        self.locks.release_all(rec.digest)
        self.held.pop(rec.digest, None)
        self.running -= 1
        left = self.active_by_epoch[rec.done_epoch] - 1
        if left:
            self.active_by_epoch[rec.done_epoch] = left
        else:
            del self.active_by_epoch[rec.done_epoch]
        if self.ready:
            self._start(self.ready.popleft())
        # settle dispatches before on_done: the callback inspects engine
        # state (barrier checks) and must never see a freed lock whose
        # waiter has not been pushed through yet
        self.pump()
        if self.on_done:
            self.on_done(rec, status, exec_start, self.now())

    # -- aborts ------------------------------------------------------------

    def abort(self, rec: TxRecord) -> None:
        """Drop the current attempt: release locks, consume its positions,
        and rewind the record so it can be reinjected."""
        if rec.phase in (Phase.EXECUTING, Phase.DONE):
            raise ValueError("cannot abort an executing or finished tx")
        rec.abort_count += 1
        self.locks.release_all(rec.digest)
        self.held.pop(rec.digest, None)
        self.orderer.consume(rec)
        rec.reset_attempt()

    def stuck_confirmed(self) -> list[TxRecord]:
        """Confirmed txs that cannot run: the residue the deadlock resolver
        inspects once execution has drained."""
        return [self.orderer.records[d]
                for d in sorted(self.orderer.records)
                if self.orderer.records[d].phase == Phase.CONFIRMED]
