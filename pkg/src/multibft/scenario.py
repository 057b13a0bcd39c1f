"""Scenario configuration: defaults, dict/YAML loading, validation.

A scenario is pure data.  The harness turns it into a simulator, nodes,
and a workload; nothing here touches the event loop.  Validation errors
name the offending field (dotted path) so config mistakes in sweep files
are quick to find.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .workload import WorkloadConfig, WorkloadError


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    base_min_ms: float = 20.0
    base_max_ms: float = 50.0
    jitter_ms: float = 5.0
    delta_ms: float = 500.0
    gst_ms: float = 0.0


@dataclass(frozen=True)
class ProcConfig:
    per_msg_ms: float = 0.05
    per_tx_ms: float = 0.01


@dataclass(frozen=True)
class FaultConfig:
    kind: str
    target: str
    at_ms: float = 0.0
    factor: float = 1.0


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    mode: str = "hydra"
    n: int = 4
    m: int = 4
    epoch_len: int = 16
    seed: int = 1
    batch_timeout_ms: float = 100.0
    propose_cost_ms: float = 50.0
    max_batch: int = 256
    view_timeout_ms: float | None = None
    slots: int = 8
    vertex_cost_ms: float = 1.0
    max_ms: float = 600_000.0
    min_epochs: int = 2
    drain_ms: float = 1000.0
    trace: bool = False
    link: LinkConfig = field(default_factory=LinkConfig)
    proc: ProcConfig = field(default_factory=ProcConfig)
    faults: tuple[FaultConfig, ...] = ()
    workload: WorkloadConfig = field(default_factory=lambda: WorkloadConfig(tx_count=100))

    @property
    def f(self) -> int:
        return (self.n - 1) // 3


def _take(d: dict, key: str, kind, where: str, default, nullable: bool = False):
    if key not in d:
        return default
    v = d.pop(key)
    if v is None and nullable:
        return None
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind) or isinstance(v, bool) and kind is not bool:
        raise ScenarioError(f"{where}{key}: expected {kind.__name__}, got {type(v).__name__}")
    return v


def _no_leftovers(d: dict, where: str) -> None:
    if d:
        raise ScenarioError(f"{where}{sorted(d)[0]}: unknown field")


def scenario_from_dict(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("top level: expected a mapping")
    d = dict(raw)

    name = _take(d, "name", str, "", "scenario")
    mode = _take(d, "mode", str, "", "hydra")
    if mode not in ("hydra", "iss"):
        raise ScenarioError("mode: must be 'hydra' or 'iss'")
    n = _take(d, "n", int, "", 4)
    if n < 4:
        raise ScenarioError("n: need at least 4 replicas (f >= 1)")
    m = _take(d, "m", int, "", n)
    if m < 1:
        raise ScenarioError("m: must be at least 1")
    epoch_len = _take(d, "epoch_len", int, "", 16)
    if epoch_len < 1:
        raise ScenarioError("epoch_len: must be at least 1")
    seed = _take(d, "seed", int, "", 1)
    batch_timeout_ms = _take(d, "batch_timeout_ms", float, "", 100.0)
    if batch_timeout_ms <= 0:
        raise ScenarioError("batch_timeout_ms: must be positive")
    propose_cost_ms = _take(d, "propose_cost_ms", float, "", 50.0)
    if propose_cost_ms < 0:
        raise ScenarioError("propose_cost_ms: must not be negative")
    max_batch = _take(d, "max_batch", int, "", 256)
    if max_batch < 1:
        raise ScenarioError("max_batch: must be at least 1")
    view_timeout_ms = _take(d, "view_timeout_ms", float, "", None, nullable=True)
    if view_timeout_ms is not None and view_timeout_ms <= 0:
        raise ScenarioError("view_timeout_ms: must be positive or null")
    slots = _take(d, "slots", int, "", 8)
    if slots < 1:
        raise ScenarioError("slots: must be at least 1")
    vertex_cost_ms = _take(d, "vertex_cost_ms", float, "", 1.0)
    if vertex_cost_ms < 0:
        raise ScenarioError("vertex_cost_ms: must not be negative")
    max_ms = _take(d, "max_ms", float, "", 600_000.0)
    min_epochs = _take(d, "min_epochs", int, "", 2)
    drain_ms = _take(d, "drain_ms", float, "", 1000.0)
    trace = _take(d, "trace", bool, "", False)

    link_d = dict(_take(d, "link", dict, "", {}))
    link = LinkConfig(
        base_min_ms=_take(link_d, "base_min_ms", float, "link.", 20.0),
        base_max_ms=_take(link_d, "base_max_ms", float, "link.", 50.0),
        jitter_ms=_take(link_d, "jitter_ms", float, "link.", 5.0),
        delta_ms=_take(link_d, "delta_ms", float, "link.", 500.0),
        gst_ms=_take(link_d, "gst_ms", float, "link.", 0.0))
    _no_leftovers(link_d, "link.")
    if link.base_min_ms > link.base_max_ms:
        raise ScenarioError("link.base_min_ms: exceeds base_max_ms")

    proc_d = dict(_take(d, "proc", dict, "", {}))
    proc = ProcConfig(
        per_msg_ms=_take(proc_d, "per_msg_ms", float, "proc.", 0.05),
        per_tx_ms=_take(proc_d, "per_tx_ms", float, "proc.", 0.01))
    _no_leftovers(proc_d, "proc.")

    faults = []
    raw_faults = _take(d, "faults", list, "", [])
    crash_budget = (n - 1) // 3
    crashes = 0
    for idx, fd in enumerate(raw_faults):
        where = f"faults[{idx}]."
        if not isinstance(fd, dict):
            raise ScenarioError(f"faults[{idx}]: expected a mapping")
        fd = dict(fd)
        kind = _take(fd, "kind", str, where, None)
        if kind not in ("crash", "straggler"):
            raise ScenarioError(f"{where}kind: must be 'crash' or 'straggler'")
        target = _take(fd, "target", str, where, None)
        if target is None or not target.startswith("r"):
            raise ScenarioError(f"{where}target: expected a replica name like 'r1'")
        try:
            rid = int(target[1:])
        except ValueError:
            raise ScenarioError(f"{where}target: expected a replica name like 'r1'")
        if not 0 <= rid < n:
            raise ScenarioError(f"{where}target: replica id out of range")
        at_ms = _take(fd, "at_ms", float, where, 0.0)
        factor = _take(fd, "factor", float, where, 1.0)
        _no_leftovers(fd, where)
        if kind == "crash":
            crashes += 1
            if crashes > crash_budget:
                raise ScenarioError(f"{where}kind: more crashes than f={crash_budget}")
        faults.append(FaultConfig(kind, target, at_ms, factor))

    wl_d = dict(_take(d, "workload", dict, "", {}))
    for fixed in ("m", "num_clients"):
        if fixed in wl_d:
            raise ScenarioError(f"workload.{fixed}: set by the scenario, not the workload")
    workload = WorkloadConfig(
        tx_count=_take(wl_d, "tx_count", int, "workload.", 100),
        cross_instance_ratio=_take(wl_d, "cross_instance_ratio", float, "workload.", 0.0),
        objects_per_tx=_take(wl_d, "objects_per_tx", int, "workload.", 2),
        object_universe=_take(wl_d, "object_universe", int, "workload.", 512),
        payload_bytes=_take(wl_d, "payload_bytes", int, "workload.", 500),
        client_rate=_take(wl_d, "client_rate", float, "workload.", 1000.0),
        num_clients=_take(wl_d, "clients", int, "workload.", 4),
        m=m,
        start_ms=_take(wl_d, "start_ms", float, "workload.", 5.0))
    _no_leftovers(wl_d, "workload.")
    try:
        workload.validate()
    except WorkloadError as e:
        raise ScenarioError(f"workload.{e}") from e

    _no_leftovers(d, "")
    return Scenario(
        name=name, mode=mode, n=n, m=m, epoch_len=epoch_len, seed=seed,
        batch_timeout_ms=batch_timeout_ms, propose_cost_ms=propose_cost_ms,
        max_batch=max_batch, view_timeout_ms=view_timeout_ms, slots=slots,
        vertex_cost_ms=vertex_cost_ms, max_ms=max_ms, min_epochs=min_epochs,
        drain_ms=drain_ms, trace=trace, link=link, proc=proc,
        faults=tuple(faults), workload=workload)


def scenario_to_dict(sc: Scenario) -> dict:
    """The loadable-form inverse of scenario_from_dict, for programmatic
    tweaking: mutate the dict, then reload through validation."""
    return {
        "name": sc.name, "mode": sc.mode, "n": sc.n, "m": sc.m,
        "epoch_len": sc.epoch_len, "seed": sc.seed,
        "batch_timeout_ms": sc.batch_timeout_ms,
        "propose_cost_ms": sc.propose_cost_ms, "max_batch": sc.max_batch,
        "view_timeout_ms": sc.view_timeout_ms, "slots": sc.slots,
        "vertex_cost_ms": sc.vertex_cost_ms, "max_ms": sc.max_ms,
        "min_epochs": sc.min_epochs, "drain_ms": sc.drain_ms,
        "trace": sc.trace,
        "link": {"base_min_ms": sc.link.base_min_ms,
                 "base_max_ms": sc.link.base_max_ms,
                 "jitter_ms": sc.link.jitter_ms,
                 "delta_ms": sc.link.delta_ms, "gst_ms": sc.link.gst_ms},
        "proc": {"per_msg_ms": sc.proc.per_msg_ms,
                 "per_tx_ms": sc.proc.per_tx_ms},
        "faults": [{"kind": fc.kind, "target": fc.target, "at_ms": fc.at_ms,
                    "factor": fc.factor} for fc in sc.faults],
        "workload": {"tx_count": sc.workload.tx_count,
                     "cross_instance_ratio": sc.workload.cross_instance_ratio,
                     "objects_per_tx": sc.workload.objects_per_tx,
                     "object_universe": sc.workload.object_universe,
                     "payload_bytes": sc.workload.payload_bytes,
                     "client_rate": sc.workload.client_rate,
                     "clients": sc.workload.num_clients,
                     "start_ms": sc.workload.start_ms},
    }


def load_scenario(path: str) -> Scenario:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ScenarioError(f"{path}: {e}") from e
    except yaml.YAMLError as e:
        raise ScenarioError(f"{path}: bad YAML: {e}") from e
    try:
        return scenario_from_dict(raw if raw is not None else {})
    except ScenarioError as e:
        raise ScenarioError(f"{path}: {e}") from e
