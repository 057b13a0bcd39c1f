"""Metric collection and reporting.

One replica in each run is the observer: it stamps proposal, confirmation
and execution times for every tx digest it sees.  Client nodes own the
submission and reply times.  A TxTimeline merges the two views; a
RunReport aggregates them into throughput, mean latency, and the
four-phase breakdown.

Phase accounting (per executed tx, measured at the observer):
  transmission = (proposed - submitted) + (replied - executed_end)
  consensus    = confirmed - proposed
  ordering     = 0 in hydra mode (there is no global order to wait for;
                 confirmation and lock waits land under execution);
                 execution_start - confirmed in iss mode (global-slot wait)
  execution    = executed_end - confirmed in hydra mode,
                 executed_end - execution_start in iss mode
The four terms telescope to replied - submitted exactly, so the breakdown
sums to the end-to-end latency by construction.  Individual terms can go
slightly negative when the reply quorum outruns the observer's own
execution; the sum is still exact.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field


class ObserverBook:
    """Per-digest stamps collected on the observer replica."""

    def __init__(self):
        self.proposed: dict[bytes, float] = {}
        self.confirmed: dict[bytes, float] = {}
        self.executed: dict[bytes, tuple[int, float, float, int]] = {}
        self.barrier_aborts = 0
        self.victim_aborts = 0

    def stamp_proposed(self, digest: bytes, t: float) -> None:
        self.proposed.setdefault(digest, t)

    def stamp_confirmed(self, digest: bytes, t: float) -> None:
        self.confirmed[digest] = t

    def stamp_executed(self, digest: bytes, attempt: int, t_start: float,
                       t_end: float, status) -> None:
        self.executed[digest] = (attempt, t_start, t_end, int(status))

    def count_barrier_abort(self) -> None:
        self.barrier_aborts += 1

    def count_victim_abort(self) -> None:
        self.victim_aborts += 1


@dataclass
class TxTimeline:
    tx_id: bytes
    client: int
    submitted: float
    replied: float
    status: int
    attempt: int
    proposed: float | None = None
    confirmed: float | None = None
    exec_start: float | None = None
    exec_end: float | None = None
    exec_status: int | None = None
    exec_attempt: int | None = None

    @property
    def latency(self) -> float:
        return self.replied - self.submitted

    @property
    def breakdown_ready(self) -> bool:
        """True when every stamp exists and the reply the client counted
        is the attempt the observer watched execute."""
        return (self.proposed is not None and self.confirmed is not None
                and self.exec_end is not None
                and self.exec_attempt == self.attempt
                and self.exec_status == self.status)


def build_timelines(clients, book: ObserverBook) -> list[TxTimeline]:
    out = []
    for cl in clients:
        for tx_id, (status, attempt, replied_at) in cl.outcomes.items():
            tl = TxTimeline(tx_id, cl.client_id, cl.submitted[tx_id],
                            replied_at, int(status), attempt)
            tl.proposed = book.proposed.get(tx_id)
            tl.confirmed = book.confirmed.get(tx_id)
            ex = book.executed.get(tx_id)
            if ex is not None:
                tl.exec_attempt, tl.exec_start, tl.exec_end, tl.exec_status = ex
            out.append(tl)
    out.sort(key=lambda tl: (tl.replied, tl.tx_id))
    return out


@dataclass
class RunReport:
    config_hash: str
    mode: str
    seed: int
    submitted: int
    completed: int
    success: int
    failure: int
    throughput_ktps: float      # steady window (first/last 10% excluded)
    gross_tput_tps: float       # all completions over the full span
    mean_latency_ms: float
    transmission_ms: float
    consensus_ms: float
    ordering_ms: float
    execution_ms: float
    breakdown_n: int
    aborts: int
    deadlocks: int
    timeseries: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def breakdown_total_ms(self) -> float:
        return (self.transmission_ms + self.consensus_ms
                + self.ordering_ms + self.execution_ms)


def summarize(config_hash: str, mode: str, seed: int, submitted: int,
              timelines: list[TxTimeline], book: ObserverBook,
              steady_frac: float = 0.10) -> RunReport:
    completed = len(timelines)
    success = sum(1 for tl in timelines if tl.status == 0)
    failure = completed - success

    mean_latency = trans = cons = order = execu = 0.0
    ready = [tl for tl in timelines if tl.breakdown_ready]
    if ready:
        n = len(ready)
        mean_latency = sum(tl.latency for tl in ready) / n
        trans = sum((tl.proposed - tl.submitted) + (tl.replied - tl.exec_end)
                    for tl in ready) / n
        cons = sum(tl.confirmed - tl.proposed for tl in ready) / n
        if mode == "iss":
            order = sum(tl.exec_start - tl.confirmed for tl in ready) / n
            execu = sum(tl.exec_end - tl.exec_start for tl in ready) / n
        else:
            order = 0.0
            execu = sum(tl.exec_end - tl.confirmed for tl in ready) / n

    steady_tput = 0.0
    gross_tput = 0.0
    timeseries: list[tuple[int, int, float]] = []
    if timelines:
        t0 = min(tl.submitted for tl in timelines)
        t1 = max(tl.replied for tl in timelines)
        span = t1 - t0
        if span > 0:
            gross_tput = completed / span * 1000.0
            lo = t0 + steady_frac * span
            hi = t1 - steady_frac * span
            inside = sum(1 for tl in timelines if lo <= tl.replied <= hi)
            if hi > lo:
                steady_tput = inside / (hi - lo)  # per ms == ktps
        buckets: dict[int, list[float]] = {}
        for tl in timelines:
            buckets.setdefault(int(tl.replied // 1000), []).append(tl.latency)
        for sec in sorted(buckets):
            lats = buckets[sec]
            timeseries.append((sec, len(lats), sum(lats) / len(lats)))

    return RunReport(
        config_hash=config_hash, mode=mode, seed=seed, submitted=submitted,
        completed=completed, success=success, failure=failure,
        throughput_ktps=steady_tput, gross_tput_tps=gross_tput,
        mean_latency_ms=mean_latency, transmission_ms=trans,
        consensus_ms=cons, ordering_ms=order, execution_ms=execu,
        breakdown_n=len(ready), aborts=book.barrier_aborts,
        deadlocks=book.victim_aborts, timeseries=timeseries)


SUMMARY_COLUMNS = ("config_hash", "mode", "seed", "tx_count",
                   "throughput_ktps", "mean_latency_ms", "transmission_ms",
                   "consensus_ms", "ordering_ms", "execution_ms",
                   "aborts", "deadlocks")

TIMESERIES_COLUMNS = ("config_hash", "mode", "seed", "second",
                      "replies", "mean_latency_ms")


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def emit_report(report: RunReport, out_dir: str) -> tuple[str, str]:
    """Write/append the summary row and the per-second timeseries.
    Rerunning the same config+seed into a fresh directory reproduces the
    files byte for byte."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        summary_path = os.path.join(out_dir, "summary.csv")
        new = not os.path.exists(summary_path)
        with open(summary_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(SUMMARY_COLUMNS)
            w.writerow((report.config_hash, report.mode, report.seed,
                        report.completed, _fmt(report.throughput_ktps),
                        _fmt(report.mean_latency_ms),
                        _fmt(report.transmission_ms), _fmt(report.consensus_ms),
                        _fmt(report.ordering_ms), _fmt(report.execution_ms),
                        report.aborts, report.deadlocks))
        ts_path = os.path.join(out_dir, "timeseries.csv")
        new = not os.path.exists(ts_path)
        with open(ts_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(TIMESERIES_COLUMNS)
            for sec, replies, lat in report.timeseries:
                w.writerow((report.config_hash, report.mode, report.seed,
                            sec, replies, _fmt(lat)))
        return summary_path, ts_path
    except OSError as e:
        raise OSError(f"writing report under {out_dir}: {e}") from e
