"""Scenario execution: wire a cluster from a Scenario, run it, report.

One call, one deterministic simulation.  The returned RunResult keeps
live references to the replicas and clients so tests can assert on
internal state (boundary snapshots, stores, logs) beyond the metrics.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .codec import KeyRing
from .metrics import ObserverBook, RunReport, build_timelines, summarize
from .replica import ClientNode, HydraReplica, IssReplica
from .scenario import Scenario
from .simnet import FaultSpec, LinkModel, ProcModel, Simulator
from .workload import by_client, generate_workload


def config_hash(sc: Scenario) -> str:
    blob = json.dumps(asdict(sc), sort_keys=True, default=str)
    return hashlib.blake2b(blob.encode(), digest_size=6).hexdigest()


@dataclass
class RunResult:
    scenario: Scenario
    report: RunReport
    sim: object
    replicas: list
    clients: list
    observer: object            # the observer replica; its book is .obs
    completed: bool
    boundaries: dict[str, list] = field(default_factory=dict)
    stores: dict[str, dict] = field(default_factory=dict)

    def alive_replicas(self) -> list:
        return [r for r in self.replicas if r.alive_at(self.sim.now)]


def build_cluster(sc: Scenario):
    link = LinkModel(seed=sc.seed,
                     base_range_ms=(sc.link.base_min_ms, sc.link.base_max_ms),
                     jitter_ms=sc.link.jitter_ms, delta_ms=sc.link.delta_ms,
                     gst_ms=sc.link.gst_ms)
    sim = Simulator(sc.seed, link, trace=sc.trace)
    ring = KeyRing(sc.seed)
    cls = HydraReplica if sc.mode == "hydra" else IssReplica
    proc = lambda: ProcModel(per_msg_ms=sc.proc.per_msg_ms,
                             per_tx_ms=sc.proc.per_tx_ms)
    reps = [cls(r, sc.n, sc.f, ring, m=sc.m, epoch_len=sc.epoch_len,
                num_clients=sc.workload.num_clients, slots=sc.slots,
                vertex_cost_ms=sc.vertex_cost_ms,
                batch_timeout_ms=sc.batch_timeout_ms,
                propose_cost_ms=sc.propose_cost_ms, max_batch=sc.max_batch,
                view_timeout_ms=sc.view_timeout_ms, proc=proc())
            for r in range(sc.n)]
    clients = [ClientNode(c, sc.n, sc.f, proc=proc())
               for c in range(sc.workload.num_clients)]
    for node in reps + clients:
        sim.add_node(node)
    for fc in sc.faults:
        sim.inject_fault(FaultSpec(fc.kind, fc.target, fc.at_ms, fc.factor),
                         max_crash_faults=sc.f)

    # the observer is the lowest-id replica no fault touches; with every
    # replica faulted, fall back to the lowest-id non-crashed one
    faulted = {fc.target for fc in sc.faults}
    crashed = {fc.target for fc in sc.faults if fc.kind == "crash"}
    obs_rep = next((r for r in reps if r.name not in faulted),
                   next(r for r in reps if r.name not in crashed))
    obs_rep.obs = ObserverBook()

    for r in reps:
        r.start()
    return sim, ring, reps, clients, obs_rep


def run_scenario(sc: Scenario) -> RunResult:
    sim, ring, reps, clients, obs_rep = build_cluster(sc)
    items = generate_workload(sc.workload, ring, sc.seed)
    return run_with_plans(sc, by_client(items),
                          (sim, reps, clients, obs_rep))


def run_with_plans(sc: Scenario, plans, cluster=None) -> RunResult:
    """Drive a run from an explicit {client: [(at_ms, tx)]} schedule.
    run_scenario is this plus the stock workload generator."""
    if cluster is None:
        sim, _, reps, clients, obs_rep = build_cluster(sc)
    else:
        sim, reps, clients, obs_rep = cluster
    for c, plan in sorted(plans.items()):
        clients[c].load_schedule(plan)

    def busy() -> bool:
        if not all(cl.done for cl in clients):
            return True
        return any(r.orderer.current_epoch < sc.min_epochs
                   for r in reps if r.alive_at(sim.now))

    sim.run_while(busy, chunk_ms=1000.0, max_ms=sc.max_ms)
    completed = not busy()
    if sc.drain_ms > 0:
        sim.run_until(sim.now + sc.drain_ms)

    submitted = sum(len(cl.submitted) for cl in clients)
    timelines = build_timelines(clients, obs_rep.obs)
    report = summarize(config_hash(sc), sc.mode, sc.seed, submitted,
                       timelines, obs_rep.obs)
    return RunResult(
        scenario=sc, report=report, sim=sim, replicas=reps, clients=clients,
        observer=obs_rep, completed=completed,
        boundaries={r.name: list(r.boundaries) for r in reps},
        stores={r.name: dict(r.store) for r in reps})


def check_boundary_agreement(result: RunResult) -> int:
    """Boundary tuples must match across live replicas; returns how many
    common boundaries were compared.  Raises AssertionError on divergence."""
    alive = result.alive_replicas()
    if not alive:
        return 0
    common = min(len(r.boundaries) for r in alive)
    for k in range(common):
        row = {r.boundaries[k] for r in alive}
        if len(row) != 1:
            detail = "; ".join(f"{r.name}={r.boundaries[k]}" for r in alive)
            raise AssertionError(f"boundary {k} diverged: {detail}")
    return common
