"""Deterministic workload generation with a cross-instance ratio knob.

Objects are drawn from a fixed universe bucketed by (owning client,
owning instance).  Each transaction's first object belongs to the
submitting client, which is what routes the replies home.  Whether a tx
is cross-instance is decided up front on a fixed stride, so the realized
fraction tracks the knob exactly; object sampling then retries until the
drawn objects match that classification.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .codec import KeyRing
from .core import OpCode, TransactionDag, make_signed_tx, owner_of
from .partition import assign


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    tx_count: int
    cross_instance_ratio: float = 0.0
    objects_per_tx: int = 2
    object_universe: int = 512      # lower bound; pools are padded non-empty
    payload_bytes: int = 500        # metadata only, carried into reports
    client_rate: float = 1000.0     # aggregate submissions per second
    num_clients: int = 4
    m: int = 4
    start_ms: float = 5.0

    def validate(self) -> None:
        if self.tx_count <= 0:
            raise WorkloadError("tx_count: must be positive")
        if not 0.0 <= self.cross_instance_ratio <= 1.0:
            raise WorkloadError("cross_instance_ratio: outside [0, 1]")
        if self.objects_per_tx < 1:
            raise WorkloadError("objects_per_tx: must be at least 1")
        if self.object_universe < 2 * self.objects_per_tx:
            raise WorkloadError("object_universe: need at least 2*objects_per_tx")
        if self.client_rate <= 0:
            raise WorkloadError("client_rate: must be positive")
        if self.num_clients < 1:
            raise WorkloadError("num_clients: must be at least 1")
        if self.m < 1:
            raise WorkloadError("m: must be at least 1")
        if self.cross_instance_ratio > 0 and self.m == 1:
            raise WorkloadError("UNSATISFIABLE: cross_instance_ratio > 0 needs m >= 2")
        if self.cross_instance_ratio > 0 and self.objects_per_tx < 2:
            raise WorkloadError("UNSATISFIABLE: cross txs need objects_per_tx >= 2")


@dataclass
class ScheduledTx:
    client: int
    at_ms: float
    tx: TransactionDag
    cross: bool
    instances: tuple[int, ...] = field(default=())


def build_pools(cfg: WorkloadConfig) -> dict[tuple[int, int], list[bytes]]:
    """Object keys bucketed by (owner client, owning instance).  Scans
    sequential key names until the universe size is reached and every
    bucket holds at least one key."""
    pools: dict[tuple[int, int], list[bytes]] = {
        (c, i): [] for c in range(cfg.num_clients) for i in range(cfg.m)}
    total = 0
    n = 0
    while total < cfg.object_universe or any(not p for p in pools.values()):
        key = b"obj-%d" % n
        n += 1
        slot = (owner_of(key, cfg.num_clients), assign(key, cfg.m))
        if total >= cfg.object_universe and pools[slot]:
            continue
        pools[slot].append(key)
        total += 1
    return pools


def is_cross_slot(k: int, ratio: float) -> bool:
    """Fixed stride: the realized fraction of the first k slots is always
    within one tx of k*ratio."""
    return math.floor((k + 1) * ratio) - math.floor(k * ratio) == 1


def _sample_tx_objects(rng: random.Random, cfg: WorkloadConfig, pools,
                       by_instance: dict[int, list[bytes]], all_keys: list[bytes],
                       client: int, want_cross: bool) -> list[bytes]:
    for _ in range(1000):
        if want_cross:
            i1, i2 = rng.sample(range(cfg.m), 2)
            first = rng.choice(pools[(client, i1)])
            second = rng.choice(by_instance[i2])
            rest_pool = all_keys
            chosen = [first, second]
        else:
            i1 = rng.randrange(cfg.m)
            first = rng.choice(pools[(client, i1)])
            rest_pool = by_instance[i1]
            chosen = [first]
        for _ in range(cfg.objects_per_tx - len(chosen)):
            pick = rng.choice(rest_pool)
            if pick in chosen:
                break
            chosen.append(pick)
        if len(chosen) != cfg.objects_per_tx:
            continue
        spans = len({assign(k, cfg.m) for k in chosen})
        if want_cross != (spans >= 2):
            continue
        return chosen
    raise WorkloadError("INFEASIBLE: could not sample a %s tx"
                        % ("cross" if want_cross else "local"))


def generate_workload(cfg: WorkloadConfig, ring: KeyRing, seed: int) -> list[ScheduledTx]:
    """The full submission schedule, deterministic in (cfg, seed)."""
    cfg.validate()
    rng = random.Random(seed)
    pools = build_pools(cfg)
    by_instance: dict[int, list[bytes]] = {i: [] for i in range(cfg.m)}
    for (c, i), keys in sorted(pools.items()):
        by_instance[i].extend(keys)
    all_keys = [k for i in range(cfg.m) for k in by_instance[i]]
    gap = 1000.0 / cfg.client_rate
    out: list[ScheduledTx] = []
    for k in range(cfg.tx_count):
        client = k % cfg.num_clients
        cross = is_cross_slot(k, cfg.cross_instance_ratio)
        objs = _sample_tx_objects(rng, cfg, pools, by_instance, all_keys,
                                  client, cross)
        specs = [(obj, OpCode.ADD, 1, None) for obj in objs]
        edges = {(j, j + 1) for j in range(len(objs) - 1)}
        tx = make_signed_tx(ring, cfg.num_clients, specs, edges)
        ins = tuple(sorted({assign(o, cfg.m) for o in objs}))
        out.append(ScheduledTx(client, cfg.start_ms + k * gap, tx, cross, ins))
    return out


def cross_fraction(items: list[ScheduledTx]) -> float:
    if not items:
        return 0.0
    return sum(1 for it in items if len(it.instances) >= 2) / len(items)


def by_client(items: list[ScheduledTx]) -> dict[int, list[tuple[float, TransactionDag]]]:
    """Shape the schedule the way ClientNode.load_schedule wants it."""
    plans: dict[int, list[tuple[float, TransactionDag]]] = {}
    for it in items:
        plans.setdefault(it.client, []).append((it.at_ms, it.tx))
    return plans
