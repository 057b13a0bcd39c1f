"""Global round-robin interleave and the single-lane executor."""

from multibft.baseline import (GlobalLog, SerialExecutor, execute_next_global,
                               global_index, slot_of)
from multibft.codec import KeyRing
from multibft.execution import apply_tx

from helpers import FakeLoop, block, key_for_instance, signed_add, signed_transfer


def test_global_index_examples():
    assert global_index(0, 1, 3) == 3
    assert global_index(2, 0, 3) == 2
    assert global_index(0, 0, 3) == 0
    assert global_index(1, 2, 3) == 7


def test_global_index_roundtrip():
    for m in (1, 3, 4, 8):
        seen = set()
        for g in range(100):
            ins, sn = slot_of(g, m)
            assert 0 <= ins < m
            assert global_index(ins, sn, m) == g
            seen.add((ins, sn))
        assert len(seen) == 100


def test_cursor_waits_on_gaps_and_matches_serial_replay():
    ring = KeyRing(9)
    m = 2
    ka = key_for_instance(m, 0)
    kb = key_for_instance(m, 1)
    kc = key_for_instance(m, 0, salt=1)
    a = signed_add(ring, ka, 5)
    b = signed_add(ring, kb, 7)
    c = signed_transfer(ring, ka, kc, 2)

    glog = GlobalLog(m)
    store = {}
    # nothing filled yet
    assert execute_next_global(glog, store) == "WAITING_GAP"

    # fill out of order: g=1 and g=2 present, g=0 missing
    glog.fill(block(1, 0, [b]))
    glog.fill(block(0, 1, [c]))
    assert execute_next_global(glog, store) == "WAITING_GAP"
    assert store == {}

    glog.fill(block(0, 0, [a]))
    assert execute_next_global(glog, store) == "EXECUTED"
    assert execute_next_global(glog, store) == "EXECUTED"
    assert execute_next_global(glog, store) == "EXECUTED"
    assert execute_next_global(glog, store) == "WAITING_GAP"
    assert glog.exec_cursor == 3

    oracle = {}
    for tx in (a, b, c):
        apply_tx(tx, oracle)
    assert store == oracle


def test_duplicate_fill_is_idempotent():
    ring = KeyRing(9)
    ka = key_for_instance(1, 0)
    a = signed_add(ring, ka, 3)
    glog = GlobalLog(1)
    glog.fill(block(0, 0, [a]))
    glog.fill(block(0, 0, [a]))
    store = {}
    assert execute_next_global(glog, store) == "EXECUTED"
    assert execute_next_global(glog, store) == "WAITING_GAP"
    assert store[ka] == 3


def test_serial_cost_law():
    # 12 single-vertex txs take exactly 12 cost units back to back
    ring = KeyRing(9)
    m = 4
    glog = GlobalLog(m)
    txs = []
    for sn in range(3):
        for ins in range(m):
            tx = signed_add(ring, key_for_instance(m, ins, salt=sn), 1)
            txs.append(tx)
            glog.fill(block(ins, sn, [tx]))

    loop = FakeLoop()
    store = {}
    oracle = {}
    done = []

    def on_done(tx, status, g, t0, t1):
        apply_tx(tx, oracle)
        assert store == oracle      # store is always an exact prefix
        done.append((tx.tx_id, g, t0, t1))

    ex = SerialExecutor(glog, store, vertex_cost_ms=1.0,
                        schedule=loop.schedule, now=lambda: loop.now,
                        on_done=on_done)
    ex.pump()
    loop.run()

    assert loop.now == 12.0
    assert [g for _, g, _, _ in done] == list(range(12))
    assert [t1 for _, _, _, t1 in done] == [float(i + 1) for i in range(12)]
    # strictly one at a time
    for _, _, t0, t1 in done:
        assert t1 - t0 == 1.0
    assert ex.min_pending_g() is None
    assert ex.executed_count == 12


def test_vertex_count_scales_cost():
    ring = KeyRing(9)
    ka = key_for_instance(1, 0)
    kb = key_for_instance(1, 0, salt=1)
    a = signed_add(ring, ka, 4)
    t = signed_transfer(ring, ka, kb, 1)   # two vertices
    glog = GlobalLog(1)
    glog.fill(block(0, 0, [a]))
    glog.fill(block(0, 1, [t]))

    loop = FakeLoop()
    ends = []
    ex = SerialExecutor(glog, {}, vertex_cost_ms=1.0,
                        schedule=loop.schedule, now=lambda: loop.now,
                        on_done=lambda tx, s, g, t0, t1: ends.append(t1))
    ex.pump()
    loop.run()
    assert ends == [1.0, 3.0]


def test_gap_stalls_timed_executor_until_filled():
    ring = KeyRing(9)
    glog = GlobalLog(1)
    txs = [signed_add(ring, key_for_instance(1, 0, salt=i), 1) for i in range(4)]
    glog.fill(block(0, 0, [txs[0]]))
    glog.fill(block(0, 1, [txs[1]]))
    glog.fill(block(0, 3, [txs[3]]))    # sn 2 missing

    loop = FakeLoop()
    done = []
    ex = SerialExecutor(glog, {}, vertex_cost_ms=1.0,
                        schedule=loop.schedule, now=lambda: loop.now,
                        on_done=lambda tx, s, g, t0, t1: done.append((g, t0, t1)))
    ex.pump()
    loop.run()
    assert [g for g, _, _ in done] == [0, 1]
    assert glog.exec_cursor == 2
    assert not ex.running

    # late block arrives at t=9; work behind the gap resumes after it
    loop.now = 9.0
    glog.fill(block(0, 2, [txs[2]]))
    ex.pump()
    loop.run()
    assert [g for g, _, _ in done] == [0, 1, 2, 3]
    assert done[2][1] == 9.0
    assert done[3][2] == 11.0


def test_empty_blocks_pass_through():
    ring = KeyRing(9)
    ka = key_for_instance(1, 0)
    a = signed_add(ring, ka, 2)
    glog = GlobalLog(1)
    glog.fill(block(0, 0, []))
    glog.fill(block(0, 1, []))
    glog.fill(block(0, 2, [a]))

    loop = FakeLoop()
    store = {}
    ex = SerialExecutor(glog, store, vertex_cost_ms=1.0,
                        schedule=loop.schedule, now=lambda: loop.now)
    ex.pump()
    loop.run()
    assert glog.exec_cursor == 3
    assert store[ka] == 2
    assert ex.executed_count == 1


def test_gc_below_drops_consumed_slots():
    ring = KeyRing(9)
    glog = GlobalLog(2)
    a = signed_add(ring, key_for_instance(2, 0), 1)
    glog.fill(block(0, 0, [a]))
    glog.fill(block(1, 0, []))
    glog.fill(block(0, 1, []))
    store = {}
    for _ in range(3):
        assert execute_next_global(glog, store) == "EXECUTED"
    glog.gc_below(3)
    assert glog.filled == {}
