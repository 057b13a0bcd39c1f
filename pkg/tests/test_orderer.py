"""Ordering layer tests: frontiers, confirmation, positions, epoch staging."""

from multibft.codec import KeyRing
from multibft.core import SystemState
from multibft.orderer import Orderer, Phase

from helpers import block, key_for_instance, signed_add, signed_transfer

M = 4
EPOCH_LEN = 4


def fresh():
    return Orderer(M, EPOCH_LEN), KeyRing(1)


def test_initial_state_vector_sentinels():
    o, _ = fresh()
    assert o.state_vector() == SystemState((-1, -1, -1, -1))


def test_gapless_frontier_and_buffered_gap():
    o, ring = fresh()
    t0 = signed_add(ring, key_for_instance(M, 0, 0))
    t1 = signed_add(ring, key_for_instance(M, 0, 1))
    t2 = signed_add(ring, key_for_instance(M, 0, 2))
    assert o.on_sb_deliver(block(0, 0, [t0]))
    assert o.on_sb_deliver(block(0, 2, [t2]))  # gap at sn=1
    o.integrate()
    assert o.logs[0].frontier == 0
    assert o.logs[0].integrated_sn == 0
    assert o.on_sb_deliver(block(0, 1, [t1]))
    o.integrate()
    assert o.logs[0].frontier == 2
    assert o.logs[0].integrated_sn == 2
    assert [o.records[d].phase for d in (t0.tx_id, t1.tx_id, t2.tx_id)] == [Phase.CONFIRMED] * 3


def test_duplicate_delivery_is_idempotent():
    o, ring = fresh()
    t0 = signed_add(ring, key_for_instance(M, 0))
    b = block(0, 0, [t0])
    assert o.on_sb_deliver(b)
    assert not o.on_sb_deliver(b)
    o.integrate()
    assert o.duplicate_deliveries == 1
    assert o.logs[0].frontier == 0
    assert len(o.logs[0].feed) == 1


def test_cross_tx_confirms_only_when_all_instances_deliver():
    o, ring = fresh()
    tx = signed_transfer(ring, key_for_instance(M, 0), key_for_instance(M, 1))
    o.on_sb_deliver(block(0, 0, [tx]))
    got = o.integrate()
    assert got == []
    rec = o.records[tx.tx_id]
    assert rec.phase == Phase.DELIVERING
    assert rec.tracker.flags == [True, False]
    o.on_sb_deliver(block(1, 0, [tx]))
    got = o.integrate()
    assert [r.digest for r in got] == [tx.tx_id]
    assert rec.phase == Phase.CONFIRMED
    assert rec.tracker.confirmed
    assert rec.positions == {0: 0, 1: 0}


def test_first_pending_skips_consumed_and_stops_at_unconfirmed():
    o, ring = fresh()
    intra = signed_add(ring, key_for_instance(M, 0, 0))
    cross = signed_transfer(ring, key_for_instance(M, 0, 1), key_for_instance(M, 1, 0))
    o.on_sb_deliver(block(0, 0, [intra, cross]))
    o.integrate()
    head = o.first_pending(0)
    assert head is not None and head.digest == intra.tx_id
    head.phase = Phase.DONE
    o.consume(head)
    # next live entry is the cross tx, still unconfirmed
    assert o.first_pending(0) is None
    assert o.head_record(0).digest == cross.tx_id
    o.on_sb_deliver(block(1, 0, [cross]))
    o.integrate()
    assert o.first_pending(0).digest == cross.tx_id
    assert o.first_pending(1).digest == cross.tx_id


def test_integration_runs_past_epoch_boundary():
    o, ring = fresh()
    txs = [signed_add(ring, key_for_instance(M, 0, i)) for i in range(6)]
    for sn in range(6):  # epoch 0 is sns 0..3; 4,5 belong to epoch 1
        o.on_sb_deliver(block(0, sn, [txs[sn]]))
    for i in range(1, M):
        for sn in range(EPOCH_LEN):
            o.on_sb_deliver(block(i, sn, []))
    o.integrate()
    assert o.logs[0].frontier == 5
    assert o.logs[0].integrated_sn == 5  # no gate at the window edge
    # intra txs of either window confirm; each sits in a single epoch
    assert o.records[txs[4].tx_id].phase == Phase.CONFIRMED
    assert o.attempt_epoch(o.records[txs[3].tx_id]) == 0
    assert o.attempt_epoch(o.records[txs[4].tx_id]) == 1
    assert o.epoch_complete()
    assert o.window_delivered(0) and not o.window_delivered(1)


def test_straddling_attempt_never_confirms():
    o, ring = fresh()
    tx = signed_transfer(ring, key_for_instance(M, 0), key_for_instance(M, 1))
    o.on_sb_deliver(block(0, 0, [tx]))              # epoch 0 side
    o.on_sb_deliver(block(1, EPOCH_LEN, [tx]))      # epoch 1 side
    for sn in range(EPOCH_LEN):
        o.on_sb_deliver(block(1, sn, []))
    o.integrate()
    rec = o.records[tx.tx_id]
    assert rec.tracker.confirmed            # delivered everywhere...
    assert rec.phase == Phase.DELIVERING    # ...but split across windows
    assert o.attempt_epoch(rec) is None
    assert o.first_pending(0) is None       # the head parks its cursor

    # closing epoch 0 aborts the attempt but keeps the epoch-1 delivery
    assert [r.digest for r in o.abort_candidates(0)] == [tx.tx_id]
    need = o.abort_clamped(rec, 0)
    assert need == [0]
    assert rec.phase == Phase.DELIVERING and rec.attempt == 1
    assert rec.delivered == {1} and set(rec.positions) == {1}
    assert o.head_record(0) is None

    # the re-proposal lands in instance 0's epoch-1 window: now it confirms
    for sn in range(1, EPOCH_LEN):
        o.on_sb_deliver(block(0, sn, []))
    o.on_sb_deliver(block(0, EPOCH_LEN, [tx]))
    got = o.integrate()
    assert [r.digest for r in got] == [tx.tx_id]
    assert rec.phase == Phase.CONFIRMED
    assert o.attempt_epoch(rec) == 1


def test_epoch_state_vector_clamps_to_window():
    o, ring = fresh()
    for sn in range(6):
        o.on_sb_deliver(block(0, sn, []))
    o.on_sb_deliver(block(1, 0, []))
    assert o.state_vector() == SystemState((5, 0, -1, -1))
    assert o.epoch_state_vector(0) == SystemState((3, 0, -1, -1))


def test_live_prefix_excludes_consumed():
    o, ring = fresh()
    a = signed_add(ring, key_for_instance(M, 0, 0))
    b = signed_add(ring, key_for_instance(M, 0, 1))
    c = signed_add(ring, key_for_instance(M, 0, 2))
    o.on_sb_deliver(block(0, 0, [a, b, c]))
    o.integrate()
    rec_b = o.records[b.tx_id]
    rec_b.phase = Phase.DONE
    o.consume(rec_b)
    assert o.live_prefix(0, 2) == [a.tx_id]


def test_reset_attempt_allows_redelivery_at_new_position():
    o, ring = fresh()
    tx = signed_transfer(ring, key_for_instance(M, 0), key_for_instance(M, 1))
    o.on_sb_deliver(block(0, 0, [tx]))
    o.integrate()
    rec = o.records[tx.tx_id]
    o.consume(rec)
    rec.reset_attempt()
    assert rec.attempt == 1 and rec.delivered == set()
    o.on_sb_deliver(block(0, 1, [tx]))
    o.on_sb_deliver(block(1, 0, [tx]))
    o.integrate()
    assert rec.phase == Phase.CONFIRMED
    assert rec.positions == {0: 1, 1: 0}


def test_retry_ahead_of_barrier_is_parked_then_reinterpreted():
    # A retry occurrence can land before this replica has closed the window
    # that aborts the old attempt.  It must not be read as a stale duplicate
    # of the current attempt; it waits until the old position is consumed.
    o, ring = fresh()
    tx = signed_transfer(ring, key_for_instance(M, 0), key_for_instance(M, 1))
    o.on_sb_deliver(block(0, 0, [tx]))              # epoch 0 side
    for sn in range(EPOCH_LEN):
        o.on_sb_deliver(block(1, sn, []))
    o.on_sb_deliver(block(1, EPOCH_LEN, [tx]))      # epoch 1 side
    o.integrate()
    rec = o.records[tx.tx_id]
    assert rec.phase == Phase.DELIVERING and o.attempt_epoch(rec) is None

    # the retry for instance 0 arrives ahead of the local barrier
    for sn in range(1, EPOCH_LEN):
        o.on_sb_deliver(block(0, sn, []))
    o.on_sb_deliver(block(0, EPOCH_LEN, [tx]))
    got = o.integrate()
    assert got == []
    assert o.logs[0].parked == [1]
    assert rec.positions == {0: 0, 1: 0}    # old attempt untouched
    assert o.first_pending(0) is None

    # closing epoch 0 consumes the old position; the parked entry then
    # reads as the fresh delivery of attempt 1
    assert [r.digest for r in o.abort_candidates(0)] == [tx.tx_id]
    assert o.abort_clamped(rec, 0) == [0]
    got = o.integrate()
    assert [r.digest for r in got] == [tx.tx_id]
    assert rec.phase == Phase.CONFIRMED and rec.attempt == 1
    assert rec.positions == {0: 1, 1: 0}
    assert o.attempt_epoch(rec) == 1
    assert o.logs[0].parked == [] and not o.logs[0].parked_digests


def test_same_window_duplicate_is_stale_without_parking():
    o, ring = fresh()
    tx = signed_transfer(ring, key_for_instance(M, 0), key_for_instance(M, 1))
    o.on_sb_deliver(block(0, 0, [tx]))
    o.on_sb_deliver(block(1, 0, [tx]))
    o.integrate()
    rec = o.records[tx.tx_id]
    assert rec.phase == Phase.CONFIRMED
    o.on_sb_deliver(block(0, 1, [tx]))     # duplicate inside the same window
    o.integrate()
    assert o.logs[0].parked == []
    assert o.logs[0].consumed[1] is True
    assert rec.positions == {0: 0, 1: 0} and rec.attempt == 0


def test_parked_entry_for_pruned_record_is_swept():
    o, ring = fresh()
    tx = signed_add(ring, key_for_instance(M, 0))
    o.on_sb_deliver(block(0, 0, [tx]))
    o.integrate()
    rec = o.records[tx.tx_id]
    for sn in range(1, EPOCH_LEN):
        o.on_sb_deliver(block(0, sn, []))
    o.on_sb_deliver(block(0, EPOCH_LEN, [tx]))
    o.integrate()
    assert o.logs[0].parked == [1]
    o.consume(rec)
    rec.phase = Phase.DONE
    del o.records[tx.tx_id]                # pruned after completion
    o.integrate()
    assert o.logs[0].parked == []
    assert o.logs[0].consumed[1] is True


def test_second_occurrence_queues_behind_parked_first():
    o, ring = fresh()
    tx = signed_transfer(ring, key_for_instance(M, 0), key_for_instance(M, 1))
    o.on_sb_deliver(block(0, 0, [tx]))
    for sn in range(EPOCH_LEN):
        o.on_sb_deliver(block(1, sn, []))
    o.on_sb_deliver(block(1, EPOCH_LEN, [tx]))
    for sn in range(1, EPOCH_LEN):
        o.on_sb_deliver(block(0, sn, []))
    o.on_sb_deliver(block(0, EPOCH_LEN, [tx]))
    o.on_sb_deliver(block(0, EPOCH_LEN + 1, [tx]))
    o.integrate()
    rec = o.records[tx.tx_id]
    assert o.logs[0].parked == [1, 2]

    o.abort_clamped(rec, 0)
    o.integrate()
    # first parked entry became attempt 1's delivery; the second waits on it
    assert rec.phase == Phase.CONFIRMED and rec.positions == {0: 1, 1: 0}
    assert o.logs[0].parked == [2]

    o.consume(rec)
    rec.phase = Phase.DONE
    o.integrate()
    assert o.logs[0].parked == []
    assert o.logs[0].consumed[2] is True
