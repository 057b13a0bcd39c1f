"""Per-replica ordering state: instance logs, confirmation, positions.

Each instance keeps the delivered blocks, the gapless frontier, and a
flattened feed of tx digests in log order.  The feed index of a digest
is its log position; prefix/suffix relations between transactions are
comparisons of these indexes.

Integration is continuous: contiguously delivered blocks merge into the
feeds as they arrive, across epoch boundaries.  Epochs still matter, but
as a content property rather than a gate: every epoch-boundary decision
(who gets aborted, who counts as stuck) is clamped to the entries whose
sequence numbers fall inside the closing window, so two replicas that
hold the same logs reach the same verdicts no matter how far one of them
has raced ahead.  The one rule this forces at confirmation time: an
attempt whose deliveries straddle an epoch boundary never confirms; the
earlier window's close aborts it and the retry runs entirely in a later
epoch.

A transaction may occupy several feed entries over its lifetime (it is
re-proposed after an abort); exactly one entry per instance is active
for the current attempt, the rest are consumed no-ops.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .core import Block, SystemState, TransactionDag, TxStatus, ValidationError
from .partition import assign, instances_of


class Phase(enum.IntEnum):
    QUEUED = 0       # routed, nothing delivered for the current attempt
    DELIVERING = 1   # delivered in some but not all involved instances
    CONFIRMED = 2    # delivered everywhere, awaiting execution
    EXECUTING = 3    # occupying an executor slot
    DONE = 4         # executed (SUCCESS or FAILURE), terminal


class ConfirmationTracker:
    """Per-vertex delivered flags for one tx attempt."""

    __slots__ = ("tx", "m", "flags")

    def __init__(self, tx: TransactionDag, m: int):
        self.tx = tx
        self.m = m
        self.flags = [False] * len(tx.vertices)

    def mark_instance(self, instance: int) -> None:
        for idx, v in enumerate(self.tx.vertices):
            if assign(v.obj, self.m) == instance:
                self.flags[idx] = True

    def reset(self) -> None:
        for i in range(len(self.flags)):
            self.flags[i] = False

    @property
    def confirmed(self) -> bool:
        return all(self.flags)


@dataclass
class TxRecord:
    tx: TransactionDag
    instances: tuple[int, ...]
    tracker: ConfirmationTracker
    phase: Phase = Phase.QUEUED
    attempt: int = 0
    delivered: set[int] = field(default_factory=set)
    positions: dict[int, int] = field(default_factory=dict)
    result: TxStatus | None = None
    abort_count: int = 0
    done_epoch: int = -1  # epoch of the consumed attempt, set on consume

    @property
    def digest(self) -> bytes:
        return self.tx.tx_id

    @property
    def cross(self) -> bool:
        return len(self.instances) > 1

    def is_pending(self) -> bool:
        """Delivered at least somewhere and still abortable."""
        return self.phase in (Phase.DELIVERING, Phase.CONFIRMED)

    def reset_attempt(self) -> None:
        self.attempt += 1
        self.delivered.clear()
        self.positions.clear()
        self.tracker.reset()
        self.phase = Phase.QUEUED


class InstanceLog:
    """Delivered blocks plus the execution feed for one instance."""

    def __init__(self, instance: int):
        self.instance = instance
        self.blocks: dict[int, Block] = {}
        self.frontier: int = -1          # highest contiguously delivered sn
        self.integrated_sn: int = -1     # highest sn merged into the feed
        self.feed: list[bytes] = []      # digests in log order
        self.feed_sn: list[tuple[int, int]] = []  # (sn, offset) per feed entry
        self.consumed: list[bool] = []   # entry handled (done/duplicate)
        self.cursor: int = 0             # first not-consumed feed index
        self.parked: list[int] = []      # feed indexes awaiting interpretation
        self.parked_digests: set[bytes] = set()

    def record_delivery(self, block: Block) -> bool:
        """Store a delivered block; returns False on duplicate delivery."""
        if block.sn in self.blocks:
            return False
        self.blocks[block.sn] = block
        while (self.frontier + 1) in self.blocks:
            self.frontier += 1
        return True

    def advance_cursor(self) -> None:
        while self.cursor < len(self.feed) and self.consumed[self.cursor]:
            self.cursor += 1


class Orderer:
    """Ordering state shared by both execution modes of a replica."""

    def __init__(self, m: int, epoch_len: int):
        self.m = m
        self.epoch_len = epoch_len
        self.logs = [InstanceLog(i) for i in range(m)]
        self.records: dict[bytes, TxRecord] = {}
        self.current_epoch = 0
        self.duplicate_deliveries = 0

    # -- records -----------------------------------------------------------

    def ensure_record(self, tx: TransactionDag) -> TxRecord:
        rec = self.records.get(tx.tx_id)
        if rec is None:
            rec = TxRecord(tx, instances_of(tx, self.m), ConfirmationTracker(tx, self.m))
            self.records[tx.tx_id] = rec
        return rec

    # -- delivery and integration -----------------------------------------

    def epoch_of_sn(self, sn: int) -> int:
        return sn // self.epoch_len

    def epoch_window_end(self, epoch: int) -> int:
        return (epoch + 1) * self.epoch_len - 1

    def on_sb_deliver(self, block: Block) -> bool:
        """Record an SB delivery.  Duplicate (instance, sn) deliveries are
        idempotent no-ops (counted for inspection)."""
        log = self.logs[block.instance]
        if not log.record_delivery(block):
            self.duplicate_deliveries += 1
            return False
        return True

    def integrate(self) -> list[TxRecord]:
        """Merge every contiguously delivered block into the feeds, updating
        delivery flags.  Returns txs newly confirmed.

        A repeat occurrence of a digest whose record still holds a live
        position in an earlier window (a retry racing ahead of this
        replica's barrier) is parked unread: whether it belongs to the
        current attempt or the next one depends on barrier decisions that
        are not final here yet, and reading it early would diverge from
        replicas that closed the window first.  Parked entries are
        re-examined on every integrate call and resolve once the stale
        position is consumed by an abort or a dispatch."""
        newly_confirmed: list[TxRecord] = []
        for log in self.logs:
            self._retry_parked(log, newly_confirmed)
            while log.integrated_sn < log.frontier:
                sn = log.integrated_sn + 1
                block = log.blocks[sn]
                for off, tx in enumerate(block.txs):
                    rec = self.ensure_record(tx)
                    idx = len(log.feed)
                    log.feed.append(rec.digest)
                    log.feed_sn.append((sn, off))
                    log.consumed.append(False)
                    if self._must_park(log, rec, sn):
                        log.parked.append(idx)
                        log.parked_digests.add(rec.digest)
                    else:
                        self._interpret_entry(log, idx, rec, newly_confirmed)
                log.integrated_sn = sn
                log.advance_cursor()
        return newly_confirmed

    def _must_park(self, log: InstanceLog, rec: TxRecord, sn: int) -> bool:
        if rec.digest in log.parked_digests:
            return True
        old_idx = rec.positions.get(log.instance)
        if old_idx is None or log.consumed[old_idx]:
            return False
        old_epoch = self.epoch_of_sn(log.feed_sn[old_idx][0])
        return old_epoch < self.epoch_of_sn(sn)

    def _retry_parked(self, log: InstanceLog, newly_confirmed: list[TxRecord]) -> None:
        while log.parked:
            idx = log.parked[0]
            digest = log.feed[idx]
            rec = self.records.get(digest)
            if rec is None:
                # the tx finished and was pruned; the entry is garbage
                log.consumed[idx] = True
                log.advance_cursor()
            else:
                old_idx = rec.positions.get(log.instance)
                if (old_idx is not None and old_idx < idx
                        and not log.consumed[old_idx]):
                    return  # still ambiguous; keep feed order for the rest
                self._interpret_entry(log, idx, rec, newly_confirmed)
            log.parked.pop(0)
            digest_left = any(log.feed[j] == digest for j in log.parked)
            if not digest_left:
                log.parked_digests.discard(digest)

    def _interpret_entry(self, log: InstanceLog, idx: int, rec: TxRecord,
                         newly_confirmed: list[TxRecord]) -> None:
        if rec.phase == Phase.DONE or log.instance in rec.delivered:
            # stale duplicate occurrence for this attempt
            log.consumed[idx] = True
            log.advance_cursor()
            return
        rec.delivered.add(log.instance)
        rec.positions[log.instance] = idx
        rec.tracker.mark_instance(log.instance)
        if rec.phase == Phase.QUEUED:
            rec.phase = Phase.DELIVERING
        if rec.tracker.confirmed and rec.phase == Phase.DELIVERING:
            if self.attempt_epoch(rec) is not None:
                rec.phase = Phase.CONFIRMED
                newly_confirmed.append(rec)
            # else: the attempt straddles an epoch boundary; it stays
            # DELIVERING and the earlier window's close aborts it
            # deterministically

    def position_epochs(self, rec: TxRecord) -> dict[int, int]:
        """Epoch of each active delivery position, keyed by instance."""
        return {i: self.epoch_of_sn(self.logs[i].feed_sn[idx][0])
                for i, idx in rec.positions.items()}

    def attempt_epoch(self, rec: TxRecord) -> int | None:
        """The single epoch an attempt's deliveries sit in, or None when
        they straddle windows (or nothing is delivered yet)."""
        epochs = set(self.position_epochs(rec).values())
        if len(epochs) == 1:
            return epochs.pop()
        return None

    def epoch_complete(self) -> bool:
        """All instances integrated through the current epoch's window."""
        end = self.epoch_window_end(self.current_epoch)
        return all(log.integrated_sn >= end for log in self.logs)

    def window_delivered(self, epoch: int) -> bool:
        """Every instance's frontier covers the epoch's window."""
        end = self.epoch_window_end(epoch)
        return all(log.frontier >= end for log in self.logs)

    def open_next_epoch(self) -> None:
        self.current_epoch += 1

    # -- epoch-close decisions (all clamped to window content) --------------

    def abort_candidates(self, epoch: int) -> list[TxRecord]:
        """Attempts the close of `epoch` must abort: anything delivered
        somewhere at or before the window's end without confirming inside
        it — partial deliveries and boundary straddlers alike.  Sorted by
        digest so every replica aborts in the same order."""
        out = []
        for digest in sorted(self.records):
            rec = self.records[digest]
            if rec.phase != Phase.DELIVERING:
                continue
            if min(self.position_epochs(rec).values()) <= epoch:
                out.append(rec)
        return out

    def abort_clamped(self, rec: TxRecord, epoch: int) -> list[int]:
        """Abort an attempt at the close of `epoch`, keeping deliveries
        that already landed in later windows: those count toward the
        retry, because every replica's feed contains them identically.
        Returns the instances that still need a re-proposal."""
        kept: dict[int, int] = {}
        for i, idx in rec.positions.items():
            log = self.logs[i]
            if self.epoch_of_sn(log.feed_sn[idx][0]) <= epoch:
                log.consumed[idx] = True
                log.advance_cursor()
            else:
                kept[i] = idx
        rec.attempt += 1
        rec.abort_count += 1
        rec.positions = kept
        rec.delivered = set(kept)
        rec.tracker.reset()
        for i in kept:
            rec.tracker.mark_instance(i)
        rec.phase = Phase.DELIVERING if kept else Phase.QUEUED
        return sorted(set(rec.instances) - set(kept))

    def confirmed_stuck(self, epoch: int) -> list[TxRecord]:
        """Confirmed-but-unexecuted txs belonging to windows <= epoch, in
        digest order: the clamped input to deadlock resolution."""
        out = []
        for digest in sorted(self.records):
            rec = self.records[digest]
            if rec.phase != Phase.CONFIRMED:
                continue
            ep = self.attempt_epoch(rec)
            if ep is not None and ep <= epoch:
                out.append(rec)
        return out

    # -- queries -----------------------------------------------------------

    def first_pending(self, instance: int) -> TxRecord | None:
        """Earliest live confirmed-but-unexecuted tx at or after the cursor.

        Returns None when the head is unconfirmed, executing, or the feed
        is drained; the cursor never passes over a live entry.
        """
        log = self.logs[instance]
        log.advance_cursor()
        i = log.cursor
        while i < len(log.feed):
            if log.consumed[i]:
                i += 1
                continue
            rec = self.records[log.feed[i]]
            if rec.phase == Phase.CONFIRMED:
                return rec
            return None
        return None

    def head_record(self, instance: int) -> TxRecord | None:
        """The live record at the cursor regardless of phase."""
        log = self.logs[instance]
        log.advance_cursor()
        if log.cursor < len(log.feed) and not log.consumed[log.cursor]:
            return self.records[log.feed[log.cursor]]
        return None

    def consume(self, rec: TxRecord) -> None:
        """Mark the record's active entries consumed; cursors move past."""
        for i, idx in rec.positions.items():
            log = self.logs[i]
            log.consumed[idx] = True
            log.advance_cursor()
        if rec.positions:
            rec.done_epoch = max(self.position_epochs(rec).values())

    def state_vector(self) -> SystemState:
        return SystemState(tuple(log.frontier for log in self.logs))

    def epoch_state_vector(self, epoch: int) -> SystemState:
        """Frontiers clamped to an epoch window, for boundary snapshots."""
        end = self.epoch_window_end(epoch)
        return SystemState(tuple(min(log.frontier, end) for log in self.logs))

    # -- garbage collection -------------------------------------------------

    def gc_through(self, epoch: int) -> list[bytes]:
        """Drop everything retained for epochs <= epoch: blocks, feed
        prefixes, and terminal records.  Returns the pruned tx digests.

        Every feed entry in the pruned range must already be consumed;
        pending txs are reinjected and re-proposed at the boundary, never
        carried forward through old positions, so a live entry here is a
        bug, not a case to handle.
        """
        pruned = [dg for dg, rec in self.records.items()
                  if rec.phase == Phase.DONE and rec.done_epoch <= epoch]
        for dg in pruned:
            del self.records[dg]
        end = self.epoch_window_end(epoch)
        for log in self.logs:
            split = 0
            while split < len(log.feed) and log.feed_sn[split][0] <= end:
                if not log.consumed[split]:
                    raise ValidationError("GC_LIVE_ENTRY")
                split += 1
            if split:
                del log.feed[:split]
                del log.feed_sn[:split]
                del log.consumed[:split]
                log.cursor = max(0, log.cursor - split)
                log.parked = [idx - split for idx in log.parked]
                for rec in self.records.values():
                    idx = rec.positions.get(log.instance)
                    if idx is not None:
                        rec.positions[log.instance] = idx - split
            for sn in [s for s in log.blocks if s <= end]:
                del log.blocks[sn]
        return pruned

    # -- views used by the deadlock resolver -------------------------------

    def live_prefix(self, instance: int, pos: int) -> list[bytes]:
        """Digests of live entries strictly before pos in an instance feed."""
        log = self.logs[instance]
        out = []
        for idx in range(min(pos, len(log.feed))):
            if not log.consumed[idx]:
                out.append(log.feed[idx])
        return out
