"""Observer bookkeeping, latency breakdown, and CSV emission."""

import pytest

from multibft.core import TxStatus
from multibft.metrics import (SUMMARY_COLUMNS, ObserverBook, TxTimeline,
                              build_timelines, emit_report, summarize)


class FakeClient:
    """Mirrors the ClientNode fields build_timelines reads."""

    def __init__(self, client_id, rows):
        # rows: tx_id -> (submitted, replied, status, attempt)
        self.client_id = client_id
        self.submitted = {k: v[0] for k, v in rows.items()}
        self.outcomes = {k: (v[2], v[3], v[1]) for k, v in rows.items()}


def make_book():
    book = ObserverBook()
    book.stamp_proposed(b"a", 10.0)
    book.stamp_proposed(b"a", 99.0)      # setdefault, first wins
    book.stamp_confirmed(b"a", 30.0)
    book.stamp_confirmed(b"a", 35.0)     # overwrite, last wins
    book.stamp_executed(b"a", 0, 40.0, 45.0, TxStatus.SUCCESS)
    return book


def test_book_stamp_semantics():
    book = make_book()
    assert book.proposed[b"a"] == 10.0
    assert book.confirmed[b"a"] == 35.0
    assert book.executed[b"a"] == (0, 40.0, 45.0, int(TxStatus.SUCCESS))


def test_timeline_assembly_and_readiness():
    book = make_book()
    clients = [FakeClient(0, {b"a": (5.0, 50.0, TxStatus.SUCCESS, 0),
                              b"b": (6.0, 41.0, TxStatus.SUCCESS, 0)})]
    tls = build_timelines(clients, book)
    assert [t.tx_id for t in tls] == [b"b", b"a"]  # sorted by reply time
    a = tls[1]
    assert a.breakdown_ready
    assert a.latency == 45.0
    b = tls[0]
    assert not b.breakdown_ready  # never stamped by the observer


def test_attempt_mismatch_blocks_breakdown():
    book = make_book()
    clients = [FakeClient(0, {b"a": (5.0, 50.0, TxStatus.SUCCESS, 1)})]
    (tl,) = build_timelines(clients, book)
    assert not tl.breakdown_ready


def mk_tl(i, submitted, proposed, confirmed, t0, t1, replied):
    return TxTimeline(tx_id=bytes([i]), client=0, submitted=submitted,
                      replied=replied, status=TxStatus.SUCCESS, attempt=0,
                      proposed=proposed, confirmed=confirmed,
                      exec_start=t0, exec_end=t1,
                      exec_status=TxStatus.SUCCESS, exec_attempt=0)


def test_breakdown_telescopes_to_latency():
    tls = [mk_tl(1, 0.0, 8.0, 30.0, 31.0, 33.0, 40.0),
           mk_tl(2, 10.0, 15.0, 42.0, 44.0, 47.0, 60.0)]
    for mode in ("hydra", "iss"):
        rep = summarize("cfg", mode, 1, 2, tls, ObserverBook())
        assert rep.breakdown_n == 2
        assert rep.breakdown_total_ms == pytest.approx(rep.mean_latency_ms)
    hy = summarize("cfg", "hydra", 1, 2, tls, ObserverBook())
    assert hy.ordering_ms == 0.0
    iss = summarize("cfg", "iss", 1, 2, tls, ObserverBook())
    assert iss.ordering_ms == pytest.approx((1.0 + 2.0) / 2)
    assert iss.execution_ms == pytest.approx((2.0 + 3.0) / 2)
    # hydra bills ordering-to-exec-end as execution
    assert hy.execution_ms == pytest.approx((3.0 + 5.0) / 2)


def test_summary_counts_and_timeseries():
    tls = [mk_tl(i, i * 100.0, i * 100.0 + 5, i * 100.0 + 20,
                 i * 100.0 + 21, i * 100.0 + 23, i * 100.0 + 40)
           for i in range(10)]
    rep = summarize("cfg", "hydra", 7, 12, tls, ObserverBook())
    assert rep.submitted == 12
    assert rep.completed == 10 and rep.success == 10 and rep.failure == 0
    assert sum(n for _, n, _lat in rep.timeseries) == 10
    assert rep.gross_tput_tps == pytest.approx(10 / (940.0 - 0.0) * 1000)
    assert rep.mean_latency_ms == pytest.approx(40.0)


def test_emit_report_appends_and_is_stable(tmp_path):
    tls = [mk_tl(1, 0.0, 8.0, 30.0, 31.0, 33.0, 40.0)]
    rep = summarize("cfg", "hydra", 1, 1, tls, ObserverBook())

    d1 = tmp_path / "one"
    emit_report(rep, str(d1))
    summary = d1 / "summary.csv"
    lines = summary.read_text().splitlines()
    assert lines[0] == ",".join(SUMMARY_COLUMNS)
    assert len(lines) == 2

    emit_report(rep, str(d1))  # append: no second header
    lines = summary.read_text().splitlines()
    assert len(lines) == 3 and lines[1] == lines[2]

    d2 = tmp_path / "two"
    emit_report(rep, str(d2))
    fresh = (d2 / "summary.csv").read_text().splitlines()
    assert fresh == lines[:2]  # same header, same row bytes
    assert (d2 / "timeseries.csv").exists()
