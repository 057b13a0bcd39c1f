"""Deadlock detection and deterministic victim selection.

Everything here is a pure function over the orderer's delivered-log
snapshot: log positions and pending status only, never lock-grant timing
or the clock.  That is what lets every honest replica reach the same
verdict from the same logs.

The wait relation between two pending txs a and b (a -> b means a must
wait for b):

  * ordered rule: some instance has delivered both, with b before a, or
  * pending rule: some instance of a has delivered b while a is still
    undelivered there, so a can only land after b.

`find_ordering_conflicts` / `expand_deadlock_group` / `select_victims`
follow the conflict-group construction; `fallback_victims` covers wait
cycles the pairwise conflict scan cannot see (cycles whose adjacent
members share only one instance), which otherwise stall forever.
"""

from __future__ import annotations

from .orderer import Orderer, Phase, TxRecord


def _rec(orderer: Orderer, digest: bytes) -> TxRecord:
    return orderer.records[digest]


def find_ordering_conflicts(orderer: Orderer, digest: bytes) -> set[bytes]:
    """Pending txs ordered inconsistently with this tx.

    For each ordered pair (i, j) of the tx's instances, a pending tx'
    before tx in i conflicts when it sits after tx in j, or when j is one
    of tx''s instances that has not delivered it yet.
    """
    rec = _rec(orderer, digest)
    out: set[bytes] = set()
    for i in rec.instances:
        if i not in rec.delivered:
            continue
        for other_digest in orderer.live_prefix(i, rec.positions[i]):
            if other_digest == digest:
                continue
            other = _rec(orderer, other_digest)
            if not other.is_pending():
                continue
            for j in rec.instances:
                if j == i:
                    continue
                if j in other.delivered and j in rec.delivered \
                        and other.positions[j] > rec.positions[j]:
                    out.add(other_digest)
                    break
                if j in other.instances and j not in other.delivered:
                    out.add(other_digest)
                    break
    return out


def expand_deadlock_group(orderer: Orderer, digest: bytes) -> set[bytes]:
    """Close {digest} under find_ordering_conflicts."""
    group = {digest}
    frontier = [digest]
    while frontier:
        nxt = []
        for d in sorted(frontier):
            for c in find_ordering_conflicts(orderer, d):
                if c not in group:
                    group.add(c)
                    nxt.append(c)
        frontier = nxt
    return group


def build_waits_for(orderer: Orderer, members) -> dict[bytes, set[bytes]]:
    """Directed wait edges restricted to the given digests."""
    members = set(members)
    edges: dict[bytes, set[bytes]] = {d: set() for d in members}
    for a in members:
        ra = _rec(orderer, a)
        for b in members:
            if a == b:
                continue
            rb = _rec(orderer, b)
            shared = set(ra.instances) & set(rb.instances)
            for i in shared:
                if i in ra.delivered and i in rb.delivered:
                    if rb.positions[i] < ra.positions[i]:
                        edges[a].add(b)
                        break
                elif i in rb.delivered and i not in ra.delivered:
                    edges[a].add(b)
                    break
    return edges


def has_cycle(edges: dict[bytes, set[bytes]]) -> bool:
    indeg = {d: 0 for d in edges}
    for d, outs in edges.items():
        for o in outs:
            indeg[o] += 1
    queue = [d for d, k in indeg.items() if k == 0]
    seen = 0
    while queue:
        d = queue.pop()
        seen += 1
        for o in edges[d]:
            indeg[o] -= 1
            if indeg[o] == 0:
                queue.append(o)
    return seen < len(edges)


def has_deadlock(orderer: Orderer, members) -> bool:
    return has_cycle(build_waits_for(orderer, members))


def select_victims(orderer: Orderer, group) -> list[bytes]:
    """Peel the smallest digest out of the group until no cycle remains."""
    remaining = set(group)
    edges = build_waits_for(orderer, remaining)
    victims: list[bytes] = []
    while _restricted_cycle(edges, remaining):
        victim = min(remaining)
        remaining.discard(victim)
        victims.append(victim)
    return victims


def _restricted_cycle(edges: dict[bytes, set[bytes]], keep: set[bytes]) -> bool:
    sub = {d: {o for o in outs if o in keep} for d, outs in edges.items() if d in keep}
    return has_cycle(sub)


def cycle_participants(edges: dict[bytes, set[bytes]]) -> set[bytes]:
    """Nodes lying on at least one directed cycle (SCC size >= 2)."""
    index: dict[bytes, int] = {}
    low: dict[bytes, int] = {}
    on_stack: set[bytes] = set()
    stack: list[bytes] = []
    counter = [0]
    out: set[bytes] = set()

    def strongconnect(root: bytes) -> None:
        work = [(root, iter(sorted(edges[root])))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nb in it:
                if nb not in index:
                    index[nb] = low[nb] = counter[0]
                    counter[0] += 1
                    stack.append(nb)
                    on_stack.add(nb)
                    work.append((nb, iter(sorted(edges[nb]))))
                    advanced = True
                    break
                if nb in on_stack:
                    low[node] = min(low[node], index[nb])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                if len(comp) > 1:
                    out.update(comp)

    for d in sorted(edges):
        if d not in index:
            strongconnect(d)
    return out


def fallback_victims(orderer: Orderer, stuck) -> list[bytes]:
    """Victims for wait cycles the conflict scan missed.

    Builds the wait graph over every stuck pending tx, keeps only the
    nodes actually on a cycle, and applies the same smallest-digest
    peeling to that set.
    """
    stuck = set(stuck)
    edges = build_waits_for(orderer, stuck)
    core = cycle_participants(edges)
    if not core:
        return []
    return select_victims(orderer, core)


def plan_victims(orderer: Orderer, stuck) -> list[bytes]:
    """One resolution round over a drained, fully-integrated state.

    Runs the conflict-group path first for every confirmed cross tx in
    ascending digest order; if no group yields victims, falls back to the
    whole-wait-graph scan.  Returns victims in decision order without
    duplicates.
    """
    stuck = sorted(set(stuck))
    victims: list[bytes] = []
    chosen: set[bytes] = set()
    for d in stuck:
        rec = _rec(orderer, d)
        if rec.phase != Phase.CONFIRMED or not rec.cross:
            continue
        group = expand_deadlock_group(orderer, d)
        if len(group) < 2:
            continue
        for v in select_victims(orderer, group):
            if v not in chosen:
                chosen.add(v)
                victims.append(v)
    if victims:
        return victims
    return fallback_victims(orderer, stuck)
