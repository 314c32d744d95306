"""Cluster membership and data placement.

Membership is push-pull anti-entropy gossip over per-node heartbeat
counters. Failure detection and the ACTIVE/SUSPECT/FAILED states are local
judgments derived from how long a heartbeat has been stale; only the
gossiped columns (heartbeat, address, fault domain, load) travel between
nodes, which keeps table merge commutative.

Placement is a consistent-hash ring of virtual nodes. Replica selection
walks the ring, gives fault-domain distinctness strict priority, then
biases toward lightly loaded nodes inside a bounded candidate window.
"""

from __future__ import annotations

import random
from bisect import bisect_left
from dataclasses import dataclass, field, replace

from . import errors
from .core import ObjectURI, hash64
from .errors import RdosError

ACTIVE = "ACTIVE"
SUSPECT = "SUSPECT"
FAILED = "FAILED"

DEFAULT_FANOUT = 3
DEFAULT_SUSPECT_TICKS = 5
DEFAULT_FAIL_TICKS = 10
DEFAULT_VNODES = 128
DEFAULT_REPLICAS = 3


@dataclass
class NodeInfo:
    """One row of the membership table.

    ``heartbeat``, ``address``, ``fault_domain`` and ``load`` are gossiped;
    ``state`` and ``last_advance`` are recomputed locally and never merged.
    """

    node_id: int
    address: str
    fault_domain: str
    heartbeat: int = 0
    state: str = ACTIVE
    load: float = 0.0
    last_advance: int = 0  # local tick when heartbeat last increased

    def gossip_view(self) -> dict:
        return {
            "node_id": self.node_id,
            "address": self.address,
            "fault_domain": self.fault_domain,
            "heartbeat": self.heartbeat,
            "load": self.load,
        }


@dataclass
class MembershipTable:
    """A node's view of the cluster. Always contains the local node."""

    local_id: int
    entries: dict[int, NodeInfo] = field(default_factory=dict)
    local_clock: int = 0

    @classmethod
    def bootstrap(cls, local: NodeInfo, seeds: list[NodeInfo] | None = None) -> "MembershipTable":
        table = cls(local_id=local.node_id)
        table.entries[local.node_id] = local
        for info in seeds or []:
            if info.node_id != local.node_id:
                table.entries[info.node_id] = replace(info)
        return table

    @property
    def local(self) -> NodeInfo:
        return self.entries[self.local_id]

    def active_ids(self, exclude_local: bool = False) -> list[int]:
        out = [n for n, e in self.entries.items() if e.state == ACTIVE]
        if exclude_local:
            out = [n for n in out if n != self.local_id]
        return sorted(out)

    def digest(self) -> list[dict]:
        """Gossip wire payload: every entry's gossiped columns, sorted by id."""
        return [self.entries[n].gossip_view() for n in sorted(self.entries)]

    def snapshot(self) -> "MembershipTable":
        table = MembershipTable(self.local_id, {}, self.local_clock)
        table.entries = {n: replace(e) for n, e in self.entries.items()}
        return table


def gossip_tick(table: MembershipTable, now: int, rng: random.Random,
                fanout: int = DEFAULT_FANOUT) -> list[tuple[int, list[dict]]]:
    """Advance the local heartbeat and pick peers for a push-pull round.

    Returns (peer_id, digest) pairs; the transport delivers each digest and
    routes the peer's own digest back for merging. With no ACTIVE peers the
    round is silent.
    """
    table.local_clock = now
    local = table.local
    local.heartbeat += 1
    local.last_advance = now
    local.state = ACTIVE
    peers = table.active_ids(exclude_local=True)
    if not peers:
        return []
    chosen = rng.sample(peers, min(fanout, len(peers)))
    payload = table.digest()
    return [(peer, payload) for peer in chosen]


def merge_membership(table: MembershipTable, remote_digest: list[dict]) -> MembershipTable:
    """Fold a remote digest into the table (in place; table returned).

    Per node: keep the entry with the higher heartbeat, ties keep local;
    unknown nodes are adopted. A heartbeat advance refreshes the local
    staleness bookkeeping, so a FAILED node that gossips again rejoins as
    ACTIVE on the next detection pass.
    """
    now = table.local_clock
    for row in remote_digest:
        node_id = row["node_id"]
        current = table.entries.get(node_id)
        if current is None:
            table.entries[node_id] = NodeInfo(
                node_id=node_id,
                address=row["address"],
                fault_domain=row["fault_domain"],
                heartbeat=row["heartbeat"],
                load=row["load"],
                state=ACTIVE,
                last_advance=now,
            )
        elif row["heartbeat"] > current.heartbeat:
            current.heartbeat = row["heartbeat"]
            current.address = row["address"]
            current.fault_domain = row["fault_domain"]
            current.load = row["load"]
            current.last_advance = now
            current.state = ACTIVE
    return table


def detect_failures(table: MembershipTable, now: int,
                    t_suspect: int = DEFAULT_SUSPECT_TICKS,
                    t_fail: int = DEFAULT_FAIL_TICKS) -> list[tuple[int, str, str]]:
    """Reclassify entries by heartbeat staleness; returns (node, old, new)."""
    if not (0 < t_suspect < t_fail):
        raise ValueError("need t_fail > t_suspect > 0")
    table.local_clock = max(table.local_clock, now)
    transitions: list[tuple[int, str, str]] = []
    for node_id in sorted(table.entries):
        entry = table.entries[node_id]
        if node_id == table.local_id:
            continue
        silent = now - entry.last_advance
        if silent >= t_fail:
            new_state = FAILED
        elif silent >= t_suspect:
            new_state = SUSPECT
        else:
            new_state = ACTIVE
        if new_state != entry.state:
            transitions.append((node_id, entry.state, new_state))
            entry.state = new_state
    return transitions


# --- placement ring -------------------------------------------------------

def _vnode_position(node_id: int, index: int) -> int:
    return hash64(f"{node_id}/{index}")


@dataclass
class PlacementRing:
    """Consistent-hash ring of (position, node_id) virtual nodes."""

    vnodes: list[tuple[int, int]]
    vnodes_per_node: int = DEFAULT_VNODES

    @classmethod
    def build(cls, node_ids: list[int], vnodes_per_node: int = DEFAULT_VNODES) -> "PlacementRing":
        vnodes = [(_vnode_position(n, i), n)
                  for n in sorted(set(node_ids))
                  for i in range(vnodes_per_node)]
        vnodes.sort()
        return cls(vnodes, vnodes_per_node)

    def node_ids(self) -> list[int]:
        return sorted({n for _, n in self.vnodes})

    def with_node(self, node_id: int) -> "PlacementRing":
        return PlacementRing.build(self.node_ids() + [node_id], self.vnodes_per_node)

    def without_node(self, node_id: int) -> "PlacementRing":
        return PlacementRing.build([n for n in self.node_ids() if n != node_id],
                                   self.vnodes_per_node)

    def walk(self, key_hash: int):
        """Yield distinct node ids clockwise from the key position."""
        if not self.vnodes:
            return
        start = bisect_left(self.vnodes, (key_hash, -1))
        seen: set[int] = set()
        size = len(self.vnodes)
        for step in range(size):
            node = self.vnodes[(start + step) % size][1]
            if node not in seen:
                seen.add(node)
                yield node


def ring_owners(ring: PlacementRing, table: MembershipTable, key: ObjectURI | str,
                r: int = DEFAULT_REPLICAS) -> list[int]:
    """Choose the r replica owners for a key.

    Ring walk order proposes candidates; fault-domain distinctness has
    strict priority; inside the first 2r domain-eligible candidates the
    lightest-loaded nodes win, ties broken by ring order. Deterministic for
    a given (ring, table, loads).
    """
    if r < 1:
        raise ValueError("replica count must be >= 1")
    canonical = key.canonical if isinstance(key, ObjectURI) else key
    active = {n for n, e in table.entries.items() if e.state == ACTIVE}
    if len(active) < r:
        raise RdosError(errors.INSUFFICIENT_NODES,
                        f"need {r} ACTIVE nodes, have {len(active)}")

    walk_order = [n for n in ring.walk(hash64(canonical)) if n in active]
    # Candidate window: one node per unseen fault domain first, then (once
    # domains are exhausted) repeats in ring order, up to 2r nodes.
    window: list[int] = []
    window_domains: set[str] = set()
    skipped: list[int] = []
    for node in walk_order:
        if len(window) >= 2 * r:
            break
        domain = table.entries[node].fault_domain
        if domain in window_domains:
            skipped.append(node)
        else:
            window.append(node)
            window_domains.add(domain)
    for node in skipped:
        if len(window) >= 2 * r:
            break
        window.append(node)

    rank = {node: i for i, node in enumerate(walk_order)}
    ordered = sorted(window, key=lambda n: (table.entries[n].load, rank[n]))

    owners: list[int] = []
    owner_domains: set[str] = set()
    for node in ordered:  # domain-distinct pass
        domain = table.entries[node].fault_domain
        if domain not in owner_domains:
            owners.append(node)
            owner_domains.add(domain)
        if len(owners) == r:
            return owners
    for node in ordered:  # relaxation: window has fewer domains than r
        if node not in owners:
            owners.append(node)
        if len(owners) == r:
            return owners
    for node in walk_order:  # window smaller than r: continue the walk
        if node not in owners:
            owners.append(node)
        if len(owners) == r:
            return owners
    raise RdosError(errors.INSUFFICIENT_NODES, "ring walk exhausted")


@dataclass(frozen=True)
class RemapReport:
    added: int | None
    removed: int | None
    total_keys: int
    moved: dict[str, tuple[int, int]]  # key -> (old primary, new primary)

    @property
    def moved_fraction(self) -> float:
        return len(self.moved) / self.total_keys if self.total_keys else 0.0


def ring_update(ring: PlacementRing, table: MembershipTable, keys: list[str],
                add: int | None = None, remove: int | None = None) -> tuple[PlacementRing, RemapReport]:
    """Apply a node add/remove and report which keys change primary owner.

    Ownership before and after is computed under the same membership and
    load vector, so the report isolates the effect of the ring change.
    """
    new_ring = ring
    after_table = table.snapshot()
    if add is not None:
        new_ring = new_ring.with_node(add)
        if add not in after_table.entries:
            raise RdosError(errors.INSUFFICIENT_NODES, f"node {add} not in membership")
    if remove is not None:
        new_ring = new_ring.without_node(remove)
    moved: dict[str, tuple[int, int]] = {}
    for key in keys:
        before = ring_owners(ring, table, key, r=1)[0]
        after = ring_owners(new_ring, after_table, key, r=1)[0]
        if before != after:
            moved[key] = (before, after)
    return new_ring, RemapReport(added=add, removed=remove, total_keys=len(keys), moved=moved)
