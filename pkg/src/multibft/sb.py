"""Sequenced broadcast: one PBFT state machine per (replica, instance).

Each instance runs sequential numbered rounds.  The view leader sends a
PRE-PREPARE carrying the block; replicas answer PREPARE, then COMMIT once
they hold 2f+1 matching prepares, and deliver on 2f+1 commits.  A stalled
or equivocating leader is replaced by a view change: replicas exchange
VIEW-CHANGE messages carrying their delivered frontier and any prepared
certificates, and the next leader re-proposes what survived plus no-op
fills in a NEW-VIEW.

`IdealSbHub` is a drop-in stand-in that skips all of the above and has
the simulator hand every broadcast block straight to every replica, for
tests that only care about the layers above consensus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .codec import (
    Authenticator,
    Cursor,
    DecodeError,
    KIND_REPLICA,
    KeyRing,
    enc_bytes,
    enc_seq,
    enc_u8,
    enc_u32,
    enc_u64,
    enc_i64,
)
from .core import Block, ValidationError

MSG_PREPREPARE = 0
MSG_PREPARE = 1
MSG_COMMIT = 2
MSG_VIEWCHANGE = 3
MSG_NEWVIEW = 4


def _sign_payload(tag: int, body: bytes) -> bytes:
    return b"sb:" + bytes([tag]) + body


@dataclass(frozen=True)
class PrePrepare:
    instance: int
    sn: int
    view: int
    block_bytes: bytes
    auth: Authenticator

    tag = MSG_PREPREPARE

    def body(self) -> bytes:
        return enc_u32(self.instance) + enc_u64(self.sn) + enc_u32(self.view) \
            + enc_bytes(self.block_bytes)


@dataclass(frozen=True)
class Prepare:
    instance: int
    sn: int
    view: int
    digest: bytes
    auth: Authenticator

    tag = MSG_PREPARE

    def body(self) -> bytes:
        return enc_u32(self.instance) + enc_u64(self.sn) + enc_u32(self.view) \
            + enc_bytes(self.digest)


@dataclass(frozen=True)
class Commit:
    instance: int
    sn: int
    view: int
    digest: bytes
    auth: Authenticator

    tag = MSG_COMMIT

    def body(self) -> bytes:
        return enc_u32(self.instance) + enc_u64(self.sn) + enc_u32(self.view) \
            + enc_bytes(self.digest)


@dataclass(frozen=True)
class PreparedCert:
    sn: int
    view: int
    block_bytes: bytes

    def encode(self) -> bytes:
        return enc_u64(self.sn) + enc_u32(self.view) + enc_bytes(self.block_bytes)

    @classmethod
    def decode(cls, cur: Cursor) -> "PreparedCert":
        return cls(cur.u64(), cur.u32(), cur.bytes_lp())


@dataclass(frozen=True)
class ViewChange:
    instance: int
    new_view: int
    frontier: int                       # highest contiguously delivered sn
    certs: tuple[PreparedCert, ...]
    auth: Authenticator

    tag = MSG_VIEWCHANGE

    def body(self) -> bytes:
        return enc_u32(self.instance) + enc_u32(self.new_view) \
            + enc_i64(self.frontier) \
            + enc_seq([enc_bytes(c.encode()) for c in self.certs])


@dataclass(frozen=True)
class NewView:
    instance: int
    new_view: int
    proposals: tuple[tuple[int, bytes], ...]   # (sn, block bytes)
    auth: Authenticator

    tag = MSG_NEWVIEW

    def body(self) -> bytes:
        return enc_u32(self.instance) + enc_u32(self.new_view) \
            + enc_seq(_nv_proposal_parts(self.proposals))


def encode_msg(msg) -> bytes:
    return enc_u8(msg.tag) + msg.body() + msg.auth.encode()


def decode_msg(data: bytes):
    cur = Cursor(data)
    tag = cur.u8()
    if tag == MSG_PREPREPARE:
        msg = PrePrepare(cur.u32(), cur.u64(), cur.u32(), cur.bytes_lp(),
                         Authenticator.decode(cur))
    elif tag == MSG_PREPARE:
        msg = Prepare(cur.u32(), cur.u64(), cur.u32(), cur.bytes_lp(),
                      Authenticator.decode(cur))
    elif tag == MSG_COMMIT:
        msg = Commit(cur.u32(), cur.u64(), cur.u32(), cur.bytes_lp(),
                     Authenticator.decode(cur))
    elif tag == MSG_VIEWCHANGE:
        instance = cur.u32()
        new_view = cur.u32()
        frontier = cur.i64()
        certs = tuple(PreparedCert.decode(Cursor(cur.bytes_lp()))
                      for _ in range(cur.u32()))
        msg = ViewChange(instance, new_view, frontier, certs,
                         Authenticator.decode(cur))
    elif tag == MSG_NEWVIEW:
        instance = cur.u32()
        new_view = cur.u32()
        count = cur.u32()
        props = []
        for _ in range(count):
            inner = Cursor(cur.bytes_lp())
            props.append((inner.u64(), inner.bytes_lp()))
        msg = NewView(instance, new_view, tuple(props), Authenticator.decode(cur))
    else:
        raise DecodeError("unknown sb message tag %d" % tag)
    if not cur.done():
        raise DecodeError("trailing bytes in sb message")
    return msg


def _nv_proposal_parts(proposals) -> list[bytes]:
    return [enc_bytes(enc_u64(sn) + enc_bytes(bb)) for sn, bb in proposals]


@dataclass
class Round:
    sn: int
    view: int = 0
    block: Block | None = None
    digest: bytes | None = None
    prepares: dict[int, bytes] = field(default_factory=dict)
    commits: dict[int, bytes] = field(default_factory=dict)
    prepared: bool = False
    commit_sent: bool = False
    delivered: bool = False


class SbInstance:
    """PBFT rounds for one instance, seen from one replica.

    The caller supplies plumbing: send_all(payload, tx_count) fans a
    message out to the other replicas and loops it back locally,
    deliver(sn, block) hands a decided block up, and schedule(delay, fn)
    is a busy-model timer.  A view_timeout of None disables leader
    replacement entirely (the scenario keeps whatever leader it has).
    """

    def __init__(self, *, instance: int, replica_id: int, n: int, f: int,
                 keyring: KeyRing, send_all, deliver, schedule=None, now=None,
                 view_timeout_ms: float | None = None):
        self.instance = instance
        self.replica_id = replica_id
        self.n = n
        self.f = f
        self.quorum = 2 * f + 1
        self.keyring = keyring
        self.send_all = send_all
        self.deliver_cb = deliver
        self.schedule = schedule
        self.now = now if now is not None else (lambda: 0.0)
        self.view_timeout_ms = view_timeout_ms

        self.view = 0
        self.requested_view = 0
        self.in_view_change = False
        self.rounds: dict[int, Round] = {}
        self.frontier = -1
        self.delivered_sns: set[int] = set()
        self.highest_proposed = -1
        self.low_water = 0
        self.future: list[tuple[int, object]] = []   # (view, msg) parked
        self.view_changes: dict[int, dict[int, ViewChange]] = {}
        self.new_view_sent: set[int] = set()
        self.has_work = False
        self.timeout_factor = 1
        self.timer_epoch = 0
        self.timer_running = False
        self.progress_mark = (-1, 0)
        self.suspicions = 0
        self.vc_started_at: float | None = None   # first VIEWCHANGE we sent

    # -- leader / propose --------------------------------------------------

    def leader(self, view: int | None = None) -> int:
        v = self.view if view is None else view
        return (self.instance + v) % self.n

    @property
    def is_leader(self) -> bool:
        return self.leader() == self.replica_id

    def next_sn(self) -> int:
        return max(self.frontier, self.highest_proposed) + 1

    def sb_broadcast(self, block: Block) -> None:
        if not self.is_leader or self.in_view_change:
            raise ValidationError("NOT_LEADER")
        if block.sn != self.next_sn():
            raise ValidationError("STALE_SN")
        self.highest_proposed = block.sn
        self._send_preprepare(block.sn, block.encode(), len(block.txs))

    def _send_preprepare(self, sn: int, block_bytes: bytes, tx_count: int) -> None:
        body = enc_u32(self.instance) + enc_u64(sn) + enc_u32(self.view) \
            + enc_bytes(block_bytes)
        auth = self.keyring.sign(KIND_REPLICA, self.replica_id,
                                 _sign_payload(MSG_PREPREPARE, body))
        msg = PrePrepare(self.instance, sn, self.view, block_bytes, auth)
        self.send_all(encode_msg(msg), tx_count)

    # -- inbound -----------------------------------------------------------

    def on_message(self, src: int, msg) -> None:
        if not self._authentic(src, msg):
            return
        if isinstance(msg, ViewChange):
            self._on_view_change(src, msg)
            return
        if isinstance(msg, NewView):
            self._on_new_view(src, msg)
            return
        if msg.view > self.view:
            self.future.append((msg.view, (src, msg)))
            return
        if msg.view < self.view or self.in_view_change:
            return
        if isinstance(msg, PrePrepare):
            self._on_preprepare(src, msg)
        elif isinstance(msg, Prepare):
            self._on_prepare(src, msg)
        elif isinstance(msg, Commit):
            self._on_commit(src, msg)

    def _authentic(self, src: int, msg) -> bool:
        if msg.auth.kind != KIND_REPLICA or msg.auth.party != src:
            return False
        return self.keyring.verify(msg.auth, _sign_payload(msg.tag, msg.body()))

    def _round(self, sn: int) -> Round:
        r = self.rounds.get(sn)
        if r is None or (r.view < self.view and not r.delivered):
            r = Round(sn=sn, view=self.view)
            self.rounds[sn] = r
        return r

    def _on_preprepare(self, src: int, msg: PrePrepare) -> None:
        if src != self.leader(msg.view):
            return
        r = self._round(msg.sn)
        if r.delivered:
            return
        try:
            block = Block.decode(Cursor(msg.block_bytes))
        except DecodeError:
            return
        if block.instance != self.instance or block.sn != msg.sn:
            return
        digest = block.digest()
        if r.block is not None and r.digest != digest:
            # two signed proposals for the same slot and view: the leader
            # is lying, stop this view and ask for a new one
            self.suspicions += 1
            self._start_view_change(self.view + 1)
            return
        if r.block is not None:
            return
        r.block = block
        r.digest = digest
        r.prepares[self.leader(msg.view)] = digest
        if self.replica_id != self.leader(msg.view):
            self._send_vote(Prepare, msg.sn, digest)
            r.prepares[self.replica_id] = digest
        self._check_prepared(r)
        self._check_committed(r)

    def _send_vote(self, cls, sn: int, digest: bytes) -> None:
        body = enc_u32(self.instance) + enc_u64(sn) + enc_u32(self.view) \
            + enc_bytes(digest)
        auth = self.keyring.sign(KIND_REPLICA, self.replica_id,
                                 _sign_payload(cls.tag, body))
        msg = cls(self.instance, sn, self.view, digest, auth)
        self.send_all(encode_msg(msg), 0)

    def _on_prepare(self, src: int, msg: Prepare) -> None:
        r = self._round(msg.sn)
        r.prepares.setdefault(src, msg.digest)
        self._check_prepared(r)
        self._check_committed(r)

    def _on_commit(self, src: int, msg: Commit) -> None:
        r = self._round(msg.sn)
        r.commits.setdefault(src, msg.digest)
        self._check_committed(r)

    def _check_prepared(self, r: Round) -> None:
        if r.prepared or r.digest is None:
            return
        votes = sum(1 for d in r.prepares.values() if d == r.digest)
        if votes >= self.quorum:
            r.prepared = True
            if not r.commit_sent:
                r.commit_sent = True
                self._send_vote(Commit, r.sn, r.digest)
                r.commits[self.replica_id] = r.digest

    def _check_committed(self, r: Round) -> None:
        if r.delivered or r.digest is None:
            return
        votes = sum(1 for d in r.commits.values() if d == r.digest)
        if votes < self.quorum:
            return
        r.delivered = True
        self.delivered_sns.add(r.sn)
        while self.frontier + 1 in self.delivered_sns:
            self.frontier += 1
        self.timeout_factor = 1
        self.deliver_cb(r.sn, r.block)

    # -- view change -------------------------------------------------------

    def _start_view_change(self, new_view: int) -> None:
        if new_view <= self.view or new_view <= self.requested_view:
            return
        self.requested_view = new_view
        self.in_view_change = True
        if self.vc_started_at is None:
            self.vc_started_at = self.now()
        self.timeout_factor *= 2
        certs = []
        for sn in sorted(self.rounds):
            r = self.rounds[sn]
            if sn > self.frontier and r.block is not None \
                    and (r.prepared or r.delivered):
                certs.append(PreparedCert(sn, r.view, r.block.encode()))
        body = enc_u32(self.instance) + enc_u32(new_view) \
            + enc_i64(self.frontier) \
            + enc_seq([enc_bytes(c.encode()) for c in certs])
        auth = self.keyring.sign(KIND_REPLICA, self.replica_id,
                                 _sign_payload(MSG_VIEWCHANGE, body))
        msg = ViewChange(self.instance, new_view, self.frontier,
                         tuple(certs), auth)
        self.send_all(encode_msg(msg), 0)
        self._arm_timer()

    def _on_view_change(self, src: int, msg: ViewChange) -> None:
        if msg.new_view <= self.view:
            return
        self.view_changes.setdefault(msg.new_view, {})[src] = msg
        # join once f+1 distinct replicas are provably ahead of us
        asking = {r for v, votes in self.view_changes.items()
                  if v > self.view for r in votes}
        if self.replica_id not in asking and len(asking) >= self.f + 1:
            target = min(v for v in self.view_changes if v > self.view)
            self._start_view_change(target)
        votes = self.view_changes.get(msg.new_view, {})
        if self.leader(msg.new_view) == self.replica_id \
                and len(votes) >= self.quorum \
                and msg.new_view not in self.new_view_sent:
            self._emit_new_view(msg.new_view, votes)

    def _emit_new_view(self, new_view: int, votes: dict[int, ViewChange]) -> None:
        self.new_view_sent.add(new_view)
        start = max(min(vc.frontier for vc in votes.values()) + 1,
                    self.low_water)
        best: dict[int, PreparedCert] = {}
        for vc in votes.values():
            for cert in vc.certs:
                cur = best.get(cert.sn)
                if cur is None or cert.view > cur.view:
                    best[cert.sn] = cert
        end = max(best) if best else start - 1
        proposals = []
        for sn in range(start, end + 1):
            if sn in best:
                proposals.append((sn, best[sn].block_bytes))
            else:
                filler = Block(self.instance, sn, ())
                sig = self.keyring.sign(KIND_REPLICA, self.replica_id,
                                        b"block:" + filler.digest())
                filler = Block(self.instance, sn, (), sig)
                proposals.append((sn, filler.encode()))
        body = enc_u32(self.instance) + enc_u32(new_view) \
            + enc_seq(_nv_proposal_parts(proposals))
        auth = self.keyring.sign(KIND_REPLICA, self.replica_id,
                                 _sign_payload(MSG_NEWVIEW, body))
        msg = NewView(self.instance, new_view, tuple(proposals), auth)
        self.send_all(encode_msg(msg), 0)

    def _on_new_view(self, src: int, msg: NewView) -> None:
        if msg.new_view <= self.view or src != self.leader(msg.new_view):
            return
        self.view = msg.new_view
        self.requested_view = max(self.requested_view, msg.new_view)
        self.in_view_change = False
        self.view_changes = {v: d for v, d in self.view_changes.items()
                             if v > self.view}
        for sn, block_bytes in msg.proposals:
            if sn in self.delivered_sns:
                # already decided: vote again in the new view so replicas
                # that missed the commit quorum can still reach it
                r = self.rounds.get(sn)
                if r is not None and r.digest is not None:
                    self._send_vote(Prepare, sn, r.digest)
                    self._send_vote(Commit, sn, r.digest)
                continue
            if sn <= self.frontier:
                continue
            pp_body = enc_u32(self.instance) + enc_u64(sn) \
                + enc_u32(self.view) + enc_bytes(block_bytes)
            pp_auth = self.keyring.sign(KIND_REPLICA, src,
                                        _sign_payload(MSG_PREPREPARE, pp_body))
            self._on_preprepare(src, PrePrepare(self.instance, sn, self.view,
                                                block_bytes, pp_auth))
        if msg.proposals:
            self.highest_proposed = max(self.highest_proposed,
                                        max(sn for sn, _ in msg.proposals))
        replay, self.future = self.future, []
        for view, (psrc, pmsg) in replay:
            if view >= self.view:
                self.on_message(psrc, pmsg)
        self._arm_timer()

    # -- failure detector --------------------------------------------------

    def note_work(self, pending: bool) -> None:
        self.has_work = pending
        if pending:
            self._arm_timer()

    def _arm_timer(self) -> None:
        if self.view_timeout_ms is None or self.schedule is None:
            return
        if self.timer_running:
            return
        self.timer_running = True
        self.timer_epoch += 1
        epoch = self.timer_epoch
        self.progress_mark = (self.frontier, self.view)
        self.schedule(self.view_timeout_ms * self.timeout_factor,
                      lambda: self._on_timer(epoch))

    def _on_timer(self, epoch: int) -> None:
        if epoch != self.timer_epoch:
            return
        self.timer_running = False
        idle = not self.has_work and not self._inflight()
        if idle:
            return
        if self.progress_mark == (self.frontier, self.view):
            self._start_view_change(max(self.view, self.requested_view) + 1)
        self._arm_timer()

    def _inflight(self) -> bool:
        return any(not r.delivered and r.block is not None
                   for r in self.rounds.values())

    # -- garbage collection ------------------------------------------------

    def prune_below(self, sn: int) -> None:
        self.low_water = max(self.low_water, sn)
        for old in [s for s in self.rounds if s < sn]:
            del self.rounds[old]


class IdealSbHub:
    """Consensus stand-in: a broadcast block just arrives everywhere.

    The hub owns delivery; per-replica frontends keep the SbInstance
    surface that the replica layer uses (next_sn / sb_broadcast /
    note_work), so upper layers cannot tell the difference.
    """

    def __init__(self, sim, n: int, delay_fn=None):
        self.sim = sim
        self.n = n
        self.delay_fn = delay_fn
        self.frontends: dict[tuple[int, int], "IdealSbFrontend"] = {}

    def register(self, replica_id: int, instance: int, deliver) -> "IdealSbFrontend":
        fe = IdealSbFrontend(self, replica_id, instance, deliver)
        self.frontends[(replica_id, instance)] = fe
        return fe

    def broadcast(self, src: int, instance: int, block: Block) -> None:
        payload = block.encode()
        for (rid, ins), fe in sorted(self.frontends.items()):
            if ins != instance:
                continue
            self.sim.send(f"r{src}", f"r{rid}", ("ideal-sb", payload),
                          kind="ideal-sb", tx_count=len(block.txs))


class IdealSbFrontend:
    def __init__(self, hub: IdealSbHub, replica_id: int, instance: int, deliver):
        self.hub = hub
        self.replica_id = replica_id
        self.instance = instance
        self.deliver_cb = deliver
        self.frontier = -1
        self.delivered_sns: set[int] = set()
        self.highest_proposed = -1
        self.view = 0
        self.suspicions = 0

    def leader(self, view: int | None = None) -> int:
        return self.instance % self.hub.n

    @property
    def is_leader(self) -> bool:
        return self.leader() == self.replica_id

    def next_sn(self) -> int:
        return max(self.frontier, self.highest_proposed) + 1

    def sb_broadcast(self, block: Block) -> None:
        if not self.is_leader:
            raise ValidationError("NOT_LEADER")
        if block.sn != self.next_sn():
            raise ValidationError("STALE_SN")
        self.highest_proposed = block.sn
        self.hub.broadcast(self.replica_id, self.instance, block)

    def on_ideal_block(self, payload: bytes) -> None:
        block = Block.decode(Cursor(payload))
        if block.sn in self.delivered_sns:
            return
        self.delivered_sns.add(block.sn)
        while self.frontier + 1 in self.delivered_sns:
            self.frontier += 1
        self.highest_proposed = max(self.highest_proposed, block.sn)
        self.deliver_cb(block.sn, block)

    def note_work(self, pending: bool) -> None:
        pass

    def prune_below(self, sn: int) -> None:
        pass
