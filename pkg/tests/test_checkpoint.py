import pytest

from helpers import block, key_for_instance, signed_add, signed_transfer
from multibft.checkpoint import CheckpointKeeper, CheckpointMsg, checkpoint_digest
from multibft.codec import Cursor, KeyRing
from multibft.core import ValidationError
from multibft.orderer import Orderer, Phase

GOLDEN_DIGEST = "1b7eea8b78f47e7037b4266a6b9ab371b4b9cbab8298cded0c7965960a3814ac"


def closed_epoch0(ring):
    """One-epoch orderer with everything delivered and executed."""
    o = Orderer(m=2, epoch_len=1)
    ka = key_for_instance(2, 0)
    a = signed_add(ring, ka, 7)
    c = signed_transfer(ring, key_for_instance(2, 0, 1), key_for_instance(2, 1), 3)
    o.on_sb_deliver(block(0, 0, [a, c]))
    o.on_sb_deliver(block(1, 0, [c]))
    for rec in o.integrate():
        o.consume(rec)
        rec.phase = Phase.DONE
    store = {ka: 7, key_for_instance(2, 0, 1): -3, key_for_instance(2, 1): 3}
    return o, store, (a, c)


def test_digest_golden_vector():
    o, store, _ = closed_epoch0(KeyRing(9))
    assert checkpoint_digest(o, store, 0).hex() == GOLDEN_DIGEST


def test_digest_independent_of_delivery_order():
    ring = KeyRing(9)
    o1, store, _ = closed_epoch0(ring)

    o2 = Orderer(m=2, epoch_len=1)
    ka = key_for_instance(2, 0)
    a = signed_add(ring, ka, 7)
    c = signed_transfer(ring, key_for_instance(2, 0, 1), key_for_instance(2, 1), 3)
    # reversed arrival, single late integrate
    o2.on_sb_deliver(block(1, 0, [c]))
    o2.on_sb_deliver(block(0, 0, [a, c]))
    for rec in o2.integrate():
        o2.consume(rec)
        rec.phase = Phase.DONE
    assert checkpoint_digest(o2, store, 0) == checkpoint_digest(o1, store, 0)

    # any change to execution state or block content shows up
    assert checkpoint_digest(o1, {**store, b"extra": 1}, 0) != checkpoint_digest(o1, store, 0)


def test_digest_covers_block_content():
    ring = KeyRing(9)
    o1, store, _ = closed_epoch0(ring)
    o2 = Orderer(m=2, epoch_len=1)
    ka = key_for_instance(2, 0)
    a = signed_add(ring, ka, 7)
    c = signed_transfer(ring, key_for_instance(2, 0, 1), key_for_instance(2, 1), 3)
    # same txs, packed differently: c rides alone in instance 0's block
    o2.on_sb_deliver(block(0, 0, [c, a]))
    o2.on_sb_deliver(block(1, 0, [c]))
    for rec in o2.integrate():
        o2.consume(rec)
        rec.phase = Phase.DONE
    assert checkpoint_digest(o2, store, 0) != checkpoint_digest(o1, store, 0)


def test_epoch_open_rejected():
    ring = KeyRing(9)
    o = Orderer(m=2, epoch_len=1)
    o.on_sb_deliver(block(0, 0, [signed_add(ring, key_for_instance(2, 0))]))
    o.integrate()
    with pytest.raises(ValidationError, match="EPOCH_OPEN"):
        checkpoint_digest(o, {}, 0)


def test_msg_roundtrip_and_bad_auth():
    ring = KeyRing(3)
    keeper = CheckpointKeeper(n=4, f=1, replica_id=2, keyring=ring)
    msg = keeper.make(5, b"\x11" * 32)
    back = CheckpointMsg.decode(Cursor(msg.encode()))
    assert back == msg

    # tampering with any signed field drops the vote
    forged = CheckpointMsg(5, b"\x22" * 32, 2, msg.auth)
    assert keeper.on_msg(forged) is None
    assert keeper.votes.get(5, {}) == {}


def test_stability_at_quorum():
    ring = KeyRing(3)
    keepers = [CheckpointKeeper(4, 1, r, ring) for r in range(4)]
    digest = b"\x42" * 32
    msgs = [k.make(0, digest) for k in keepers]

    target = keepers[0]
    assert target.on_msg(msgs[0]) is None
    assert target.on_msg(msgs[1]) is None
    assert target.on_msg(msgs[1]) is None  # duplicate vote, not counted
    st = target.on_msg(msgs[2])
    assert st is not None and st.epoch == 0 and st.digest == digest
    assert [m.replica for m in st.certificate] == [0, 1, 2]
    # stability reported once
    assert target.on_msg(msgs[3]) is None
    assert target.stable[0].digest == digest


def test_minority_cannot_stabilize():
    ring = KeyRing(3)
    target = CheckpointKeeper(4, 1, 0, ring)
    bad = CheckpointKeeper(4, 1, 3, ring)
    # one Byzantine signer pushing a different digest; even with the
    # honest votes split 2/2 nothing reaches 2f+1
    assert target.on_msg(bad.make(0, b"\x66" * 32)) is None
    for r in (0, 1):
        k = CheckpointKeeper(4, 1, r, ring)
        assert target.on_msg(k.make(0, b"\x42" * 32)) is None
    assert target.stable == {}


def test_gc_through_prunes_epoch_and_rebases():
    ring = KeyRing(9)
    o, _, (a, c) = closed_epoch0(ring)
    assert o.epoch_complete()
    o.open_next_epoch()

    d = signed_add(ring, key_for_instance(2, 0, 2))
    o.on_sb_deliver(block(0, 1, [d]))
    o.on_sb_deliver(block(1, 1, []))
    o.integrate()
    rec_d = o.records[d.tx_id]
    assert rec_d.positions == {0: 2}

    pruned = o.gc_through(0)
    assert sorted(pruned) == sorted([a.tx_id, c.tx_id])
    assert set(o.records) == {d.tx_id}
    for log in o.logs:
        assert all(sn > 0 for sn in log.blocks)
        assert all(sn > 0 for sn, _ in log.feed_sn)
    assert o.logs[0].feed == [d.tx_id]
    assert rec_d.positions == {0: 0}
    assert o.first_pending(0) is rec_d
    assert o.first_pending(1) is None

    # retained memory for epoch 0 is gone entirely
    assert len(o.logs[0].blocks) == 1 and len(o.logs[1].blocks) == 1


def test_gc_refuses_live_entries():
    ring = KeyRing(9)
    o = Orderer(m=2, epoch_len=1)
    o.on_sb_deliver(block(0, 0, [signed_add(ring, key_for_instance(2, 0))]))
    o.on_sb_deliver(block(1, 0, []))
    o.integrate()  # tx confirmed but never executed
    with pytest.raises(ValidationError, match="GC_LIVE_ENTRY"):
        o.gc_through(0)
