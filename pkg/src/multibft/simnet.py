"""Deterministic discrete-event network simulator.

A single-threaded event loop drives every scenario.  Events are ordered
by (fire_at_ms, seqno) so that equal timestamps resolve in scheduling
order, which together with seeded randomness makes a (seed, scenario)
pair fully determine the run.

Nodes are modeled as sequential processors: each incoming message or
timer occupies the node for a processing cost, and work queues behind
earlier work.  A straggler fault multiplies that cost, so a slow node
falls behind exactly when it is loaded, which is the effect the fault
is meant to reproduce.  A crash fault silences the node permanently
from its scheduled time onward.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field

from .codec import enc_u64


class FaultError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    """kind is "crash" (silent from at_ms) or "straggler" (cost x factor)."""

    kind: str
    target: str
    at_ms: float = 0.0
    factor: float = 1.0


@dataclass
class LinkModel:
    """Per-ordered-pair delays: fixed base plus per-message jitter.

    Base delays are derived per pair from the seed (so the topology is a
    property of the scenario, not of call order); jitter comes from a
    per-pair stream consumed in send order.  After GST every delay is
    clamped to delta_ms.
    """

    seed: int
    base_range_ms: tuple[float, float] = (20.0, 50.0)
    jitter_ms: float = 5.0
    delta_ms: float = 500.0
    gst_ms: float = 0.0
    _bases: dict[tuple[str, str], float] = field(default_factory=dict)
    _streams: dict[tuple[str, str], random.Random] = field(default_factory=dict)

    def _derive(self, tag: bytes) -> int:
        material = b"link" + enc_u64(self.seed) + tag
        return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "little")

    def base_delay(self, src: str, dst: str) -> float:
        key = (src, dst)
        got = self._bases.get(key)
        if got is None:
            lo, hi = self.base_range_ms
            rng = random.Random(self._derive(b"base:%s>%s" % (src.encode(), dst.encode())))
            got = lo if hi <= lo else rng.uniform(lo, hi)
            self._bases[key] = got
        return got

    def delay(self, src: str, dst: str, now_ms: float) -> float:
        key = (src, dst)
        stream = self._streams.get(key)
        if stream is None:
            stream = random.Random(self._derive(b"jit:%s>%s" % (src.encode(), dst.encode())))
            self._streams[key] = stream
        d = self.base_delay(src, dst) + stream.uniform(0.0, self.jitter_ms)
        if now_ms >= self.gst_ms:
            d = min(d, self.delta_ms)
        return max(d, 0.001)


@dataclass
class ProcModel:
    """Processing cost charged to a node per handled message."""

    per_msg_ms: float = 0.05
    per_tx_ms: float = 0.01

    def cost(self, tx_count: int) -> float:
        return self.per_msg_ms + self.per_tx_ms * tx_count


class Node:
    """Base class for simulated parties.  Subclasses implement on_message
    and may arm timers via the simulator."""

    def __init__(self, name: str, proc: ProcModel | None = None):
        self.name = name
        self.proc = proc
        self.sim: "Simulator" | None = None
        self.busy_until = 0.0
        self.factor = 1.0
        self.crashed_at: float | None = None

    def on_message(self, src: str, payload: bytes, meta: tuple) -> None:
        raise NotImplementedError

    def alive_at(self, t: float) -> bool:
        return self.crashed_at is None or t < self.crashed_at


@dataclass(order=True)
class Event:
    fire_at_ms: float
    seqno: int
    fn: object = field(compare=False)


class Simulator:
    def __init__(self, seed: int, link: LinkModel | None = None, trace: bool = False):
        self.seed = seed
        self.now = 0.0
        self.link = link if link is not None else LinkModel(seed=seed)
        self.nodes: dict[str, Node] = {}
        self._heap: list[Event] = []
        self._seq = 0
        self.trace: list[tuple] | None = [] if trace else None
        self.events_processed = 0

    # -- topology ----------------------------------------------------------

    def add_node(self, node: Node) -> None:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node {node.name}")
        node.sim = self
        self.nodes[node.name] = node

    def inject_fault(self, spec: FaultSpec, max_crash_faults: int | None = None) -> None:
        node = self.nodes.get(spec.target)
        if node is None:
            raise FaultError(f"unknown fault target {spec.target}")
        if spec.kind == "crash":
            if max_crash_faults is not None:
                crashed = sum(1 for n in self.nodes.values() if n.crashed_at is not None)
                if crashed + 1 > max_crash_faults:
                    raise FaultError("TOO_MANY_FAULTS: crash budget exceeded")
            node.crashed_at = spec.at_ms
        elif spec.kind == "straggler":
            if spec.factor < 1.0:
                raise FaultError("straggler factor must be >= 1")
            node.factor = spec.factor
        else:
            raise FaultError(f"unknown fault kind {spec.kind}")

    # -- scheduling --------------------------------------------------------

    def schedule(self, delay_ms: float, fn) -> None:
        self._seq += 1
        heapq.heappush(self._heap, Event(self.now + max(delay_ms, 0.0), self._seq, fn))

    def send(self, src: str, dst: str, payload: bytes, kind: str = "", tx_count: int = 0) -> float:
        """Queue payload for delivery; returns the network arrival time."""
        sender = self.nodes[src]
        if not sender.alive_at(self.now):
            return self.now
        arrive = self.now + self.link.delay(src, dst, self.now)
        self._seq += 1
        heapq.heappush(
            self._heap,
            Event(arrive, self._seq, lambda: self._arrive(src, dst, payload, kind, tx_count)),
        )
        return arrive

    def _arrive(self, src: str, dst: str, payload: bytes, kind: str, tx_count: int) -> None:
        node = self.nodes[dst]
        if not node.alive_at(self.now):
            return
        cost = (node.proc.cost(tx_count) if node.proc else 0.0) * node.factor
        start = max(self.now, node.busy_until)
        done = start + cost
        node.busy_until = done
        self._seq += 1
        heapq.heappush(
            self._heap,
            Event(done, self._seq, lambda: self._handle(node, src, payload, kind, tx_count)),
        )

    def _handle(self, node: Node, src: str, payload: bytes, kind: str, tx_count: int) -> None:
        if not node.alive_at(self.now):
            return
        if self.trace is not None:
            self.trace.append((round(self.now, 6), "deliver", src, node.name, kind, len(payload)))
        node.on_message(src, payload, (kind, tx_count))

    def node_timer(self, name: str, delay_ms: float, fn, cost_ms: float = 0.01) -> None:
        """Arm a timer whose handler occupies the node like a message does."""

        def fire():
            node = self.nodes[name]
            if not node.alive_at(self.now):
                return
            cost = cost_ms * node.factor
            start = max(self.now, node.busy_until)
            done = start + cost
            node.busy_until = done
            self._seq += 1

            def run():
                if not node.alive_at(self.now):
                    return
                if self.trace is not None:
                    self.trace.append((round(self.now, 6), "timer", name))
                fn()

            heapq.heappush(self._heap, Event(done, self._seq, run))

        self.schedule(delay_ms, fire)

    # -- execution ---------------------------------------------------------

    def run_until(self, t_end_ms: float) -> None:
        heap = self._heap
        while heap and heap[0].fire_at_ms <= t_end_ms:
            ev = heapq.heappop(heap)
            self.now = ev.fire_at_ms
            self.events_processed += 1
            ev.fn()
        self.now = max(self.now, t_end_ms)

    def run_while(self, predicate, chunk_ms: float = 1000.0, max_ms: float = 600_000.0) -> None:
        """Advance in chunks while predicate() holds and the budget lasts."""
        while predicate() and self.now < max_ms:
            self.run_until(min(self.now + chunk_ms, max_ms))
