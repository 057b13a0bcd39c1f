"""Replica and client nodes: the composition layer over the simulator.

A replica runs one sequenced-broadcast state machine per instance, routes
validated client transactions into per-instance proposal buckets, and
merges deliveries into the shared ordering state.  The two replica kinds
differ only past that point.

HydraReplica executes as soon as a transaction is delivered by every
instance it touches, under object locks, and resolves the cross-instance
deadlocks that replace a global order.  Epoch barriers are pipelined:
proposing, delivery, and execution all run ahead of a pending barrier,
and every barrier decision is clamped to the closing window's log
content so replicas that have raced different distances ahead still
decide identically.

IssReplica routes each transaction to a single instance and executes the
round-robin interleave of the logs one transaction at a time, which is
the pre-determined global ordering it is compared against.  Same logs,
same consensus, no locks; the cursor just cannot pass a slot the slowest
instance has not filled yet.
"""

from __future__ import annotations

from .baseline import GlobalLog, SerialExecutor
from .checkpoint import CheckpointKeeper, CheckpointMsg, checkpoint_digest
from .codec import Cursor, DecodeError, KIND_REPLICA, KeyRing, enc_u32, enc_u8
from .core import (Block, TransactionDag, TxStatus, ValidationError, owner_of,
                   store_digest, validate_tx)
from .deadlock import plan_victims
from .execution import ExecutionEngine
from .orderer import Orderer, Phase
from .partition import Router, assign
from .sb import PrePrepare, SbInstance, decode_msg
from .simnet import Node


def encode_reply(tx_id: bytes, status: TxStatus, attempt: int, replica_id: int) -> bytes:
    return tx_id + enc_u8(int(status)) + enc_u32(attempt) + enc_u32(replica_id)


def decode_reply(payload: bytes) -> tuple[bytes, TxStatus, int, int]:
    cur = Cursor(payload)
    out = (cur.raw(32), TxStatus(cur.u8()), cur.u32(), cur.u32())
    if not cur.done():
        raise DecodeError("trailing bytes in reply")
    return out


class ClientNode(Node):
    """Submits transactions on a schedule and waits for reply quorums.

    A transaction completes at f+1 replies agreeing on (status, attempt);
    the first quorum to form fixes the recorded outcome, later replies
    are ignored.  Replies always go to the owner of the transaction's
    first object, which by construction is the submitting client.
    """

    def __init__(self, client_id: int, n: int, f: int, proc=None):
        super().__init__(f"c{client_id}", proc)
        self.client_id = client_id
        self.n = n
        self.f = f
        self.planned = 0
        self.submitted: dict[bytes, float] = {}
        self.votes: dict[tuple[bytes, int, int], set[int]] = {}
        self.outcomes: dict[bytes, tuple[TxStatus, int, float]] = {}

    def load_schedule(self, items) -> None:
        """items: iterable of (at_ms, tx), scheduled from t=0."""
        for at_ms, tx in items:
            self.planned += 1
            self.sim.schedule(max(at_ms - self.sim.now, 0.0),
                              lambda tx=tx: self.submit(tx))

    def submit(self, tx: TransactionDag) -> None:
        if not self.alive_at(self.sim.now):
            return
        self.submitted[tx.tx_id] = self.sim.now
        payload = tx.encode()
        for r in range(self.n):
            self.sim.send(self.name, f"r{r}", payload, kind="tx", tx_count=1)

    def on_message(self, src: str, payload: bytes, meta: tuple) -> None:
        if meta[0] != "reply":
            return
        try:
            tx_id, status, attempt, rid = decode_reply(payload)
        except DecodeError:
            return
        if tx_id not in self.submitted or tx_id in self.outcomes:
            return
        key = (tx_id, int(status), attempt)
        voters = self.votes.setdefault(key, set())
        voters.add(rid)
        if len(voters) >= self.f + 1:
            self.outcomes[tx_id] = (status, attempt, self.sim.now)
            for stale in [k for k in self.votes if k[0] == tx_id]:
                del self.votes[stale]

    @property
    def done(self) -> bool:
        return self.planned == len(self.submitted) == len(self.outcomes)


class BaseReplica(Node):
    """Everything both replica kinds share: consensus, routing, proposing,
    checkpoint exchange, garbage collection, replying."""

    mode = "base"

    def __init__(self, replica_id: int, n: int, f: int, keyring: KeyRing, *,
                 m: int, epoch_len: int, num_clients: int, slots: int = 8,
                 vertex_cost_ms: float = 1.0, batch_timeout_ms: float = 100.0,
                 propose_cost_ms: float = 0.5, max_batch: int = 256,
                 view_timeout_ms: float | None = None, proc=None):
        super().__init__(f"r{replica_id}", proc)
        self.rid = replica_id
        self.n = n
        self.f = f
        self.m = m
        self.epoch_len = epoch_len
        self.num_clients = num_clients
        self.keyring = keyring
        self.slots = slots
        self.vertex_cost_ms = vertex_cost_ms
        self.batch_timeout_ms = batch_timeout_ms
        self.propose_cost_ms = propose_cost_ms
        self.max_batch = max_batch

        self.orderer = Orderer(m, epoch_len)
        self.router = Router(m)
        self.txstore: dict[bytes, TransactionDag] = {}
        self.store: dict[bytes, int] = {}
        self.keeper = CheckpointKeeper(n, f, replica_id, keyring)
        self.shadow: dict[int, dict[bytes, int]] = {}
        self.sbs = [
            SbInstance(instance=i, replica_id=replica_id, n=n, f=f,
                       keyring=keyring,
                       send_all=self._make_sb_sender(i),
                       deliver=self._make_sb_deliver(i),
                       schedule=self._node_schedule,
                       now=lambda: self.sim.now,
                       view_timeout_ms=view_timeout_ms)
            for i in range(m)
        ]
        # digests proposed by us per (instance, sn), awaiting delivery
        self.outstanding: list[dict[int, list[bytes]]] = [{} for _ in range(m)]
        self.boundaries: list[tuple[int, str, str, str]] = []
        self.boundary_times: list[float] = []
        self.gc_done_through = -1
        self.obs = None            # metrics book, set on the observer replica
        self.invalid_txs = 0
        self.replies_sent = 0

    # -- plumbing ----------------------------------------------------------

    def _node_schedule(self, delay_ms: float, fn) -> None:
        self.sim.node_timer(self.name, delay_ms, fn)

    def _exec_schedule(self, delay_ms: float, fn) -> None:
        def run():
            if self.alive_at(self.sim.now):
                fn()
        self.sim.schedule(delay_ms, run)

    def _make_sb_sender(self, instance: int):
        def send_all(payload: bytes, tx_count: int) -> None:
            frame = enc_u32(instance) + payload
            for j in range(self.n):
                if j != self.rid:
                    self.sim.send(self.name, f"r{j}", frame, kind="sb",
                                  tx_count=tx_count)
            # local loopback is immediate: our own vote counts right away
            self.sbs[instance].on_message(self.rid, decode_msg(payload))
        return send_all

    def _make_sb_deliver(self, instance: int):
        def deliver(sn: int, block: Block) -> None:
            self._on_deliver(instance, sn, block)
        return deliver

    def start(self) -> None:
        """Arm the propose loops; call after the node joins the simulator."""
        for i in range(self.m):
            self._arm_propose(i)

    def _arm_propose(self, instance: int) -> None:
        self.sim.node_timer(self.name, self.batch_timeout_ms,
                            lambda: self._propose_tick(instance),
                            cost_ms=self.propose_cost_ms)

    def _propose_tick(self, instance: int) -> None:
        try:
            self._propose(instance)
        finally:
            self._arm_propose(instance)

    # -- proposing ---------------------------------------------------------

    def _propose(self, instance: int) -> None:
        sb = self.sbs[instance]
        self._note_work(instance)
        if not sb.is_leader or getattr(sb, "in_view_change", False):
            return
        batch = self._pull_batch(instance)
        sn = sb.next_sn()
        if batch:
            # data blocks may run any distance ahead of the barrier
            self._broadcast_block(instance, sn, batch)
        elif sn <= self.orderer.epoch_window_end(self.orderer.current_epoch):
            # plug the closing window with a no-op so the barrier can fire
            self._broadcast_block(instance, sn, [])

    def _pull_batch(self, instance: int) -> list[TransactionDag]:
        out = []
        for d in self.router.buckets[instance].pull(self.max_batch):
            if not self._needs_proposal(d, instance):
                continue
            tx = self.txstore.get(d)
            if tx is not None:
                out.append(tx)
        return out

    def _broadcast_block(self, instance: int, sn: int, txs: list) -> None:
        bare = Block(instance, sn, tuple(txs))
        sig = self.keyring.sign(KIND_REPLICA, self.rid, b"block:" + bare.digest())
        block = Block(instance, sn, tuple(txs), sig)
        if txs:
            self.outstanding[instance][sn] = [t.tx_id for t in txs]
        try:
            self.sbs[instance].sb_broadcast(block)
        except ValidationError:
            self.outstanding[instance].pop(sn, None)
            for t in txs:
                self.router.buckets[instance].reinject(t.tx_id)
            return
        if self.obs is not None:
            for t in txs:
                self.obs.stamp_proposed(t.tx_id, self.sim.now)

    def _note_work(self, instance: int) -> None:
        pending = bool(self.router.buckets[instance]) \
            or bool(self.outstanding[instance])
        self.sbs[instance].note_work(pending)

    # -- inbound dispatch --------------------------------------------------

    def on_message(self, src: str, payload: bytes, meta: tuple) -> None:
        kind = meta[0]
        if kind == "sb":
            self._on_sb_frame(src, payload)
        elif kind == "tx":
            self._on_client_tx(payload)
        elif kind == "ckpt":
            self._on_ckpt(payload)

    def _on_sb_frame(self, src: str, payload: bytes) -> None:
        try:
            cur = Cursor(payload)
            instance = cur.u32()
            msg = decode_msg(payload[4:])
        except (DecodeError, IndexError):
            return
        if instance >= self.m:
            return
        if self.obs is not None and isinstance(msg, PrePrepare):
            self._stamp_proposed(msg)
        try:
            src_rid = int(src[1:])
        except ValueError:
            return
        self.sbs[instance].on_message(src_rid, msg)

    def _stamp_proposed(self, msg: PrePrepare) -> None:
        try:
            block = Block.decode(Cursor(msg.block_bytes))
        except DecodeError:
            return
        for tx in block.txs:
            self.obs.stamp_proposed(tx.tx_id, self.sim.now)

    def _on_client_tx(self, payload: bytes) -> None:
        try:
            tx = TransactionDag.decode(Cursor(payload))
            validate_tx(tx, self.keyring, self.num_clients)
        except (DecodeError, ValidationError):
            self.invalid_txs += 1
            return
        self.txstore.setdefault(tx.tx_id, tx)
        self._admit(tx)

    def _on_ckpt(self, payload: bytes) -> None:
        try:
            cur = Cursor(payload)
            msg = CheckpointMsg.decode(cur)
            if not cur.done():
                return
        except DecodeError:
            return
        if self.keeper.on_msg(msg) is not None:
            self._maybe_gc()

    # -- delivery ----------------------------------------------------------

    def _on_deliver(self, instance: int, sn: int, block: Block) -> None:
        for tx in block.txs:
            self.txstore.setdefault(tx.tx_id, tx)
        fresh = self.orderer.on_sb_deliver(block)
        if fresh:
            self._after_delivery(instance, block)
        self._reconcile_outstanding(instance)
        self._note_work(instance)

    def _reconcile_outstanding(self, instance: int) -> None:
        """Re-queue digests from our proposals that the log skipped (a view
        change no-op filled their slot)."""
        frontier = self.orderer.logs[instance].frontier
        table = self.outstanding[instance]
        for sn in sorted(s for s in table if s <= frontier):
            for d in table.pop(sn):
                if self._needs_proposal(d, instance):
                    self.router.buckets[instance].reinject(d)

    # -- replies -----------------------------------------------------------

    def _reply(self, tx: TransactionDag, status: TxStatus, attempt: int) -> None:
        dst = "c%d" % owner_of(tx.vertices[0].obj, self.num_clients)
        payload = encode_reply(tx.tx_id, status, attempt, self.rid)
        self.sim.send(self.name, dst, payload, kind="reply")
        self.replies_sent += 1

    # -- checkpointing and GC ----------------------------------------------

    def _emit_barrier(self, epoch: int) -> None:
        patched = dict(self.store)
        patched.update(self.shadow.pop(epoch, {}))
        digest = checkpoint_digest(self.orderer, patched, epoch)
        sv = self.orderer.epoch_state_vector(epoch)
        self.boundaries.append((epoch, str(sv), digest.hex(),
                                store_digest(patched).hex()))
        self.boundary_times.append(self.sim.now)
        msg = self.keeper.make(epoch, digest)
        payload = msg.encode()
        for j in range(self.n):
            if j != self.rid:
                self.sim.send(self.name, f"r{j}", payload, kind="ckpt")
        self.keeper.on_msg(msg)
        self.orderer.open_next_epoch()
        self._maybe_gc()

    def _maybe_gc(self) -> None:
        target = -1
        e = self.gc_done_through + 1
        while e < self.orderer.current_epoch and e in self.keeper.stable:
            target = e
            e += 1
        if target >= 0:
            self._gc(target)

    def _gc(self, epoch: int) -> None:
        pruned = self.orderer.gc_through(epoch)
        for d in pruned:
            self.txstore.pop(d, None)
            for bucket in self.router.buckets:
                bucket.forget(d)
        prune_sn = (epoch + 1) * self.epoch_len
        for sb in self.sbs:
            sb.prune_below(prune_sn)
        self.gc_done_through = epoch

    # -- per-mode hooks ----------------------------------------------------

    def _admit(self, tx: TransactionDag) -> None:
        raise NotImplementedError

    def _after_delivery(self, instance: int, block: Block) -> None:
        raise NotImplementedError

    def _needs_proposal(self, digest: bytes, instance: int) -> bool:
        raise NotImplementedError


class HydraReplica(BaseReplica):
    """Lock-based parallel execution behind per-transaction confirmation."""

    mode = "hydra"

    def __init__(self, replica_id, n, f, keyring, **kw):
        super().__init__(replica_id, n, f, keyring, **kw)
        self.engine = ExecutionEngine(
            self.orderer, self.store, slots=self.slots,
            vertex_cost_ms=self.vertex_cost_ms,
            schedule=self._exec_schedule,
            now=lambda: self.sim.now,
            on_done=self._on_exec_done,
            on_effects=self._on_effects)

    def _admit(self, tx: TransactionDag) -> None:
        for i in self.router.route_tx(tx):
            self._note_work(i)

    def _needs_proposal(self, digest: bytes, instance: int) -> bool:
        rec = self.orderer.records.get(digest)
        if rec is None:
            return True
        return rec.phase != Phase.DONE and instance not in rec.delivered

    def _after_delivery(self, instance: int, block: Block) -> None:
        self._pump_all()

    def _pump_all(self) -> None:
        self._integrate_and_pump()
        self._check_barriers()

    def _integrate_and_pump(self) -> None:
        newly = self.orderer.integrate()
        if self.obs is not None:
            for rec in newly:
                self.obs.stamp_confirmed(rec.digest, self.sim.now)
        self.engine.pump()

    # -- execution callbacks -----------------------------------------------

    def _on_effects(self, rec, before_images) -> None:
        # Record first-write-wins before-images for every barrier that has
        # not been emitted yet: patching them over the store reconstructs
        # the exact state at that epoch's close.
        for g in range(self.orderer.current_epoch, rec.done_epoch):
            sg = self.shadow.setdefault(g, {})
            for key, old in before_images:
                sg.setdefault(key, old)

    def _on_exec_done(self, rec, status, exec_start, exec_end) -> None:
        if self.obs is not None:
            self.obs.stamp_executed(rec.digest, rec.attempt, exec_start,
                                    exec_end, status)
        self._reply(rec.tx, status, rec.attempt)
        self._check_barriers()

    # -- the barrier state machine -----------------------------------------

    def _check_barriers(self) -> None:
        while True:
            e = self.orderer.current_epoch
            if not self.orderer.window_delivered(e):
                return
            # Settle to a fixpoint before judging anything stuck: the
            # deadlock planner's verdict is only replica-independent on a
            # fully integrated, fully pumped state.
            self._integrate_and_pump()
            if self.engine.active_at_or_below(e):
                return        # a completion callback will resume this loop
            cands = self.orderer.abort_candidates(e)
            if cands:
                for rec in cands:
                    # the failed attempt is answered; the retry, if any,
                    # will answer again with its own attempt number
                    self._reply(rec.tx, TxStatus.FAILURE, rec.attempt)
                    if self.obs is not None:
                        self.obs.count_barrier_abort()
                    for i in self.orderer.abort_clamped(rec, e):
                        self.router.buckets[i].reinject(rec.digest)
                        self._note_work(i)
                continue
            stuck = self.orderer.confirmed_stuck(e)
            if stuck:
                victims = plan_victims(self.orderer, [r.digest for r in stuck])
                if not victims:
                    raise RuntimeError("stuck barrier with no victim at epoch %d" % e)
                for d in victims:
                    rec = self.orderer.records[d]
                    self.engine.abort(rec)
                    if self.obs is not None:
                        self.obs.count_victim_abort()
                    for i in rec.instances:
                        self.router.buckets[i].reinject(d)
                        self._note_work(i)
                continue
            self._emit_barrier(e)


class IssReplica(BaseReplica):
    """Single-lane execution of the pre-determined global interleave."""

    mode = "iss"

    def __init__(self, replica_id, n, f, keyring, **kw):
        super().__init__(replica_id, n, f, keyring, **kw)
        self.glog = GlobalLog(self.m)
        self.iss_delivered: set[bytes] = set()
        self.executor = SerialExecutor(
            self.glog, self.store, vertex_cost_ms=self.vertex_cost_ms,
            schedule=self._exec_schedule, now=lambda: self.sim.now,
            on_done=self._on_iss_done)

    def _admit(self, tx: TransactionDag) -> None:
        i = assign(tx.tx_id, self.m)
        if self.router.buckets[i].offer(tx.tx_id):
            self._note_work(i)

    def _needs_proposal(self, digest: bytes, instance: int) -> bool:
        return digest not in self.iss_delivered

    def _after_delivery(self, instance: int, block: Block) -> None:
        for tx in block.txs:
            if tx.tx_id in self.iss_delivered:
                continue
            self.iss_delivered.add(tx.tx_id)
            if self.obs is not None:
                self.obs.stamp_confirmed(tx.tx_id, self.sim.now)
        self.glog.fill(block)
        self.executor.pump()
        self._check_barriers()

    def _on_iss_done(self, tx, status, g, exec_start, exec_end) -> None:
        if self.obs is not None:
            self.obs.stamp_executed(tx.tx_id, 0, exec_start, exec_end, status)
        self._reply(tx, status, 0)
        self.txstore.pop(tx.tx_id, None)
        self._check_barriers()

    def _check_barriers(self) -> None:
        while True:
            e = self.orderer.current_epoch
            end_g = (self.orderer.epoch_window_end(e) + 1) * self.m
            if self.glog.exec_cursor < end_g:
                return
            mp = self.executor.min_pending_g()
            if mp is not None and mp < end_g:
                return        # window work still in the lane; resume on done
            self._emit_barrier(e)

    def _gc(self, epoch: int) -> None:
        end = self.orderer.epoch_window_end(epoch)
        for log in self.orderer.logs:
            for sn in [s for s in log.blocks if s <= end]:
                for tx in log.blocks[sn].txs:
                    self.iss_delivered.discard(tx.tx_id)
                    self.executor.seen.discard(tx.tx_id)
                    self.txstore.pop(tx.tx_id, None)
                    for bucket in self.router.buckets:
                        bucket.forget(tx.tx_id)
        self.glog.gc_below((end + 1) * self.m)
        super()._gc(epoch)
