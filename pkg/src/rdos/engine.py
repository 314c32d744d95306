"""The cluster engine: replicated writes, reads, annotations, relations,
queries, pipelines, the scavenger, and geo change-log shipping.

One engine is one cluster. Writes fan out synchronously to every replica
owner before anything is acknowledged; the reference database, the metadata
index and the relation graphs are updated only after all replica files are
durable, so an acknowledged version is always fully readable. Inter-cluster
replication ships the change log asynchronously; conflicting metadata
resolves by logical-timestamp last-writer-wins at the granularity it was
written (whole version, single partition, single edge), ties going to the
higher cluster id.

Mutations are serialized under one lock (a strictly stronger guarantee than
per-URI serialization); the deterministic simulator drives the same code
single-threaded.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import errors
from . import pipeline as mgm
from . import tenancy as tn
from .cluster import (
    DEFAULT_REPLICAS,
    MembershipTable,
    NodeInfo,
    PlacementRing,
    ring_owners,
)
from .core import (
    MetadataPartition,
    ObjectRecord,
    ObjectURI,
    SystemMetadata,
    content_digest,
    parse_uri,
    validate_partition,
)
from .errors import RdosError
from .graph import RelationGraph
from .query import And, Clause, MetadataIndex, QueryResult, parse_query
from .storage import (
    DELETE_ANNOTATION,
    DELETE_OBJECT,
    PUT_ANNOTATION,
    PUT_OBJECT,
    PUT_RELATION,
    ChangeLog,
    ChangeLogEntry,
    NodeDown,
    ReferenceDB,
    RefEntry,
    Sidecar,
    Stamp,
    StorageNode,
    VersionInfo,
    parse_sidecar,
    serialize_sidecar,
    sidecar_path,
)

TOMBSTONE_DIGEST = "0" * 64
DEFAULT_DB_SHARDS = 16


def _now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class ScavengeReport:
    corrupt: list[tuple[int, str, str]] = field(default_factory=list)  # node, path, reason
    orphaned: list[tuple[int, str]] = field(default_factory=list)      # node, blob path
    skipped_nodes: list[int] = field(default_factory=list)
    sidecars_read: int = 0


@dataclass
class BackfillReport:
    processed: int = 0
    annotations_written: int = 0
    edges_written: int = 0
    identity_stages: int = 0
    problems: list[str] = field(default_factory=list)
    cursor: str | None = None
    done: bool = True


@dataclass(frozen=True)
class EdgeConstraint:
    direction: str  # OUT | IN | BOTH
    target_predicate: str
    label: str | None = None
    min_weight: float | None = None


@dataclass(frozen=True)
class VersionDescriptor:
    version: int
    size: int
    created_at: int
    updated_at: int
    digest: str
    tombstone: bool


class StorageEngine:
    """One cluster: nodes, placement, reference DB, index, graphs, change log."""

    def __init__(self, nodes: dict[int, StorageNode], membership: MembershipTable,
                 ring: PlacementRing, admin: tn.TenancyAdmin,
                 replicas: int = DEFAULT_REPLICAS, db_shards: int = DEFAULT_DB_SHARDS,
                 cluster_id: int = 1, clock: Callable[[], int] = _now_ms):
        self.nodes = nodes
        self.membership = membership
        self.ring = ring
        self.admin = admin
        self.replicas = replicas
        self.cluster_id = cluster_id
        self.clock = clock
        self.refdb = ReferenceDB(db_shards)
        self.refdb.assign_domains([n.fault_domain for n in nodes.values()])
        self.indexes: dict[tuple[str, str], MetadataIndex] = {}
        self.graphs: dict[tuple[str, str], RelationGraph] = {}
        self.changelog = ChangeLog(cluster_id)
        self.lamport = 0
        self.live_counts: dict[tuple[str, str], int] = {}
        self.repair_flags: list[tuple[str, int, int, str]] = []  # uri, version, node, reason
        self.dictionaries: dict[str, mgm.DataDictionary] = {}
        self.pipelines: dict[str, mgm.Pipeline] = {}
        self._lock = threading.RLock()

    # -- construction ---------------------------------------------------------

    @classmethod
    def build(cls, node_specs: list[tuple[int, str]], replicas: int = DEFAULT_REPLICAS,
              cluster_id: int = 1, clock: Callable[[], int] = _now_ms,
              store_factory: Callable[[int], object] | None = None,
              db_shards: int = DEFAULT_DB_SHARDS, vnodes: int = 128) -> "StorageEngine":
        """Cluster of in-process nodes; MemoryStore unless a factory is given."""
        nodes = {}
        for node_id, domain in node_specs:
            store = store_factory(node_id) if store_factory else None
            nodes[node_id] = StorageNode(node_id, domain, store=store)
        infos = [NodeInfo(node_id=n.node_id, address=n.address, fault_domain=n.fault_domain)
                 for _, n in sorted(nodes.items())]
        membership = MembershipTable.bootstrap(infos[0], infos[1:])
        ring = PlacementRing.build(sorted(nodes), vnodes_per_node=vnodes)
        return cls(nodes, membership, ring, tn.TenancyAdmin(), replicas=replicas,
                   cluster_id=cluster_id, clock=clock, db_shards=db_shards)

    # -- small internals --------------------------------------------------------

    def _stamp(self) -> Stamp:
        self.lamport += 1
        return (self.lamport, self.cluster_id)

    def _observe(self, stamp: Stamp) -> None:
        self.lamport = max(self.lamport, stamp[0])

    def _index(self, scope: tuple[str, str]) -> MetadataIndex:
        index = self.indexes.get(scope)
        if index is None:
            index = self.indexes[scope] = MetadataIndex()
        return index

    def _graph(self, scope: tuple[str, str]) -> RelationGraph:
        graph = self.graphs.get(scope)
        if graph is None:
            graph = self.graphs[scope] = RelationGraph(*scope)
        return graph

    def _refresh_loads(self) -> None:
        for node_id, node in self.nodes.items():
            entry = self.membership.entries.get(node_id)
            if entry is not None:
                entry.load = float(node.bytes_stored)

    def _owners(self, uri: ObjectURI) -> list[int]:
        self._refresh_loads()
        try:
            return ring_owners(self.ring, self.membership, uri, self.replicas)
        except RdosError as exc:
            raise RdosError(errors.INSUFFICIENT_REPLICAS, exc.message) from exc

    def _entry(self, uri: ObjectURI) -> RefEntry:
        entry = self.refdb.get(uri.canonical)
        if entry is None or not entry.versions:
            raise RdosError(errors.NOT_FOUND, f"no object {uri.canonical}")
        return entry

    def _live_info(self, uri: ObjectURI) -> VersionInfo:
        entry = self._entry(uri)
        info = entry.latest_info
        if info.tombstone:
            raise RdosError(errors.GONE, f"{uri.canonical} is deleted")
        return info

    def _write_replicas(self, uri: ObjectURI, info: VersionInfo,
                        blob: bytes | None, owners: Iterable[int]) -> None:
        """Persist blob and sidecar on every owner; any failure aborts the write.

        Sidecars of the aborted attempt are removed best-effort; blobs stay
        (content-addressed, possibly shared) and surface as orphans in the
        scavenger report until referenced.
        """
        owners = list(owners)
        payload = serialize_sidecar(info.to_sidecar(uri, writer=min(owners)))
        written: list[int] = []
        try:
            for node_id in owners:
                node = self.nodes[node_id]
                if blob is not None:
                    node.write_blob(info.digest, blob)
                node.write_sidecar(uri, info.version, payload)
                written.append(node_id)
        except NodeDown as exc:
            path = sidecar_path(uri, info.version)
            for node_id in written:
                try:
                    self.nodes[node_id].delete_file(path)
                except NodeDown:
                    pass
            raise RdosError(errors.INSUFFICIENT_REPLICAS, str(exc)) from exc

    def _commit_index(self, uri: ObjectURI, entry: RefEntry) -> None:
        index = self._index(uri.scope)
        if entry.live:
            index.apply_upsert(uri.canonical, entry.latest_info.partitions)
        else:
            index.apply_remove(uri.canonical)

    def _sync_graph_for(self, uri: ObjectURI, entry: RefEntry) -> None:
        graph = self._graph(uri.scope)
        graph.drop_out_edges(uri.canonical)
        if entry.live:
            for (label, target), (weight, _ts) in entry.latest_info.relations.items():
                graph.upsert_edge(uri.canonical, target, label, weight)
        graph.prune(uri.canonical)

    def _record_of(self, uri: ObjectURI, info: VersionInfo) -> ObjectRecord:
        return info.to_sidecar(uri, writer=0).to_record()

    # -- data plane ---------------------------------------------------------------

    def put_object(self, actor: tn.Principal | None, uri: ObjectURI, blob: bytes,
                   initial_partitions: list[MetadataPartition] | None = None) -> int:
        with self._lock:
            self.admin.require(actor, tn.WRITE, uri.scope)
            return self._put_object(uri, blob, initial_partitions)

    def _put_object(self, uri: ObjectURI, blob: bytes,
                    initial_partitions: list[MetadataPartition] | None = None) -> int:
        config = self.admin.namespace_config(*uri.scope)
        partitions = initial_partitions or []
        if len(partitions) > config.max_partitions:
            raise RdosError(errors.TOO_MANY_PARTITIONS,
                            f"{len(partitions)} > {config.max_partitions}")
        names = set()
        for part in partitions:
            problems = validate_partition(part)
            if problems:
                raise RdosError(errors.INVALID_PARTITION,
                                "; ".join(v.detail for v in problems))
            if part.name in names:
                raise RdosError(errors.INVALID_PARTITION,
                                f"duplicate partition {part.name!r}")
            names.add(part.name)

        existing = self.refdb.get(uri.canonical)
        if existing is not None and existing.versions and not config.versioning:
            raise RdosError(errors.VERSIONING_DISABLED,
                            f"{uri.canonical} exists and versioning is off")
        becomes_live = existing is None or not existing.versions or not existing.live
        if becomes_live and config.quota_objects is not None:
            if self.live_counts.get(uri.scope, 0) >= config.quota_objects:
                raise RdosError(errors.QUOTA_EXCEEDED,
                                f"namespace at quota {config.quota_objects}")

        owners = self._owners(uri)
        version = (max(existing.versions) + 1) if existing and existing.versions else 1
        now = self.clock()
        stamp = self._stamp()
        info = VersionInfo(
            version=version,
            size=len(blob),
            created_at=now,
            updated_at=now,
            digest=content_digest(blob),
            tombstone=False,
            created_ts=stamp,
            write_ts=stamp,
            replicas=tuple(sorted(owners)),
            partitions={p.name: dict(p.pairs) for p in partitions},
            partition_ts={p.name: stamp for p in partitions},
        )
        self._write_replicas(uri, info, blob, owners)

        entry = self.refdb.ensure(uri.canonical)
        entry.versions[version] = info
        if becomes_live:
            self.live_counts[uri.scope] = self.live_counts.get(uri.scope, 0) + 1
        self._commit_index(uri, entry)
        self._sync_graph_for(uri, entry)
        self.changelog.append(PUT_OBJECT, uri.canonical, version, {
            "digest": info.digest,
            "size": info.size,
            "created_at": info.created_at,
            "updated_at": info.updated_at,
            "partitions": {n: dict(p) for n, p in info.partitions.items()},
        }, stamp, now)
        return version

    def get_object(self, actor: tn.Principal | None, uri: ObjectURI,
                   version: int | None = None) -> tuple[ObjectRecord, bytes]:
        with self._lock:
            self.admin.require(actor, tn.READ, uri.scope)
            entry = self._entry(uri)
            if version is None:
                info = entry.latest_info
                if info.tombstone:
                    raise RdosError(errors.GONE, f"{uri.canonical} is deleted")
            else:
                info = entry.versions.get(version)
                if info is None:
                    raise RdosError(errors.NOT_FOUND,
                                    f"{uri.canonical} has no version {version}")
            record = self._record_of(uri, info)
            if info.tombstone:
                return record, b""
            return record, self._read_verified(uri, info)

    def _read_verified(self, uri: ObjectURI, info: VersionInfo) -> bytes:
        """Blob of a version from the first intact replica, digest-checked."""
        saw_corruption = False
        any_alive = False
        for node_id in info.replicas:
            node = self.nodes.get(node_id)
            if node is None or not node.alive:
                continue
            any_alive = True
            blob = node.read_blob(info.digest)
            if blob is None:
                saw_corruption = True
                self.repair_flags.append((uri.canonical, info.version, node_id, "missing blob"))
                continue
            if content_digest(blob) != info.digest:
                saw_corruption = True
                self.repair_flags.append((uri.canonical, info.version, node_id, "digest mismatch"))
                continue
            return blob
        if not any_alive:
            raise RdosError(errors.INSUFFICIENT_REPLICAS,
                            f"no live replica of {uri.canonical} v{info.version}")
        assert saw_corruption
        raise RdosError(errors.DIGEST_MISMATCH,
                        f"no intact replica of {uri.canonical} v{info.version}")

    def put_annotation(self, actor: tn.Principal | None, uri: ObjectURI,
                       partition: MetadataPartition) -> ObjectRecord:
        with self._lock:
            self.admin.require(actor, tn.ANNOTATE, uri.scope)
            return self._put_annotation(uri, partition)

    def _put_annotation(self, uri: ObjectURI, partition: MetadataPartition) -> ObjectRecord:
        config = self.admin.namespace_config(*uri.scope)
        problems = validate_partition(partition)
        if problems:
            raise RdosError(errors.INVALID_PARTITION,
                            "; ".join(v.detail for v in problems))
        info = self._live_info(uri)
        if partition.name not in info.partitions and \
                len(info.partitions) + 1 > config.max_partitions:
            raise RdosError(errors.TOO_MANY_PARTITIONS,
                            f"partition budget is {config.max_partitions}")
        updated = info.copy()
        stamp = self._stamp()
        now = self.clock()
        updated.partitions[partition.name] = dict(partition.pairs)
        updated.partition_ts[partition.name] = stamp
        updated.partition_deletes.pop(partition.name, None)
        updated.write_ts = stamp
        updated.updated_at = now
        self._write_replicas(uri, updated, None, updated.replicas)
        entry = self.refdb.get(uri.canonical)
        entry.versions[updated.version] = updated
        self._commit_index(uri, entry)
        self.changelog.append(PUT_ANNOTATION, uri.canonical, updated.version, {
            "partition": partition.name,
            "pairs": dict(partition.pairs),
        }, stamp, now)
        return self._record_of(uri, updated)

    def delete_annotation(self, actor: tn.Principal | None, uri: ObjectURI,
                          partition_name: str) -> ObjectRecord:
        with self._lock:
            self.admin.require(actor, tn.ANNOTATE, uri.scope)
            info = self._live_info(uri)
            if partition_name not in info.partitions:
                raise RdosError(errors.PARTITION_NOT_FOUND,
                                f"{uri.canonical} has no partition {partition_name!r}")
            updated = info.copy()
            stamp = self._stamp()
            now = self.clock()
            del updated.partitions[partition_name]
            updated.partition_ts.pop(partition_name, None)
            updated.partition_deletes[partition_name] = stamp
            updated.write_ts = stamp
            updated.updated_at = now
            self._write_replicas(uri, updated, None, updated.replicas)
            entry = self.refdb.get(uri.canonical)
            entry.versions[updated.version] = updated
            self._commit_index(uri, entry)
            self.changelog.append(DELETE_ANNOTATION, uri.canonical, updated.version, {
                "partition": partition_name,
            }, stamp, now)
            return self._record_of(uri, updated)

    def delete_object(self, actor: tn.Principal | None, uri: ObjectURI) -> int:
        with self._lock:
            self.admin.require(actor, tn.WRITE, uri.scope)
            entry = self._entry(uri)
            if entry.latest_info.tombstone:
                raise RdosError(errors.GONE, f"{uri.canonical} already deleted")
            owners = self._owners(uri)
            version = entry.latest + 1
            now = self.clock()
            stamp = self._stamp()
            info = VersionInfo(
                version=version, size=0, created_at=now, updated_at=now,
                digest=TOMBSTONE_DIGEST, tombstone=True, created_ts=stamp,
                write_ts=stamp, replicas=tuple(sorted(owners)),
            )
            self._write_replicas(uri, info, None, owners)
            entry.versions[version] = info
            self.live_counts[uri.scope] = max(0, self.live_counts.get(uri.scope, 0) - 1)
            self._commit_index(uri, entry)
            self._sync_graph_for(uri, entry)
            self.changelog.append(DELETE_OBJECT, uri.canonical, version, {}, stamp, now)
            return version

    def list_versions(self, actor: tn.Principal | None, uri: ObjectURI) -> list[VersionDescriptor]:
        with self._lock:
            self.admin.require(actor, tn.READ, uri.scope)
            entry = self._entry(uri)
            return [
                VersionDescriptor(v.version, v.size, v.created_at, v.updated_at,
                                  v.digest, v.tombstone)
                for _, v in sorted(entry.versions.items())
            ]

    # -- relations -------------------------------------------------------------------

    def relate(self, actor: tn.Principal | None, source: ObjectURI, target: ObjectURI,
               label: str = "RelTo", weight: float = 1.0) -> ObjectRecord:
        """Upsert a directed edge; persisted as a relation tag on the source record."""
        with self._lock:
            self.admin.require(actor, tn.ANNOTATE, source.scope)
            return self._relate(source, target, label, weight)

    def _relate(self, source: ObjectURI, target: ObjectURI,
                label: str, weight: float) -> ObjectRecord:
        if source.canonical == target.canonical:
            raise RdosError(errors.SELF_LOOP, f"{source.canonical} -> itself")
        if not (0.0 <= weight <= 1.0):
            raise RdosError(errors.WEIGHT_OUT_OF_RANGE, f"weight {weight} outside [0, 1]")
        if source.scope != target.scope:
            raise RdosError(errors.CROSS_NAMESPACE,
                            f"{target.canonical} outside {'/'.join(source.scope)}")
        info = self._live_info(source)
        updated = info.copy()
        stamp = self._stamp()
        now = self.clock()
        updated.relations[(label, target.canonical)] = (weight, stamp)
        updated.write_ts = stamp
        updated.updated_at = now
        self._write_replicas(source, updated, None, updated.replicas)
        entry = self.refdb.get(source.canonical)
        entry.versions[updated.version] = updated
        self._sync_graph_for(source, entry)
        self.changelog.append(PUT_RELATION, source.canonical, updated.version, {
            "label": label,
            "target": target.canonical,
            "weight": weight,
        }, stamp, now)
        return self._record_of(source, updated)

    def graph_for(self, actor: tn.Principal | None, tenant: str,
                  namespace: str) -> RelationGraph:
        with self._lock:
            self.admin.require(actor, tn.QUERY, (tenant, namespace))
            self.admin.namespace_config(tenant, namespace)
            return self._graph((tenant, namespace))

    def class_query(self, actor: tn.Principal | None, tenant: str, namespace: str,
                    node_predicate: str, constraints: list[EdgeConstraint]) -> list[str]:
        """Nodes whose metadata matches the predicate and that carry, for each
        constraint, at least one qualifying edge to a matching endpoint.
        Evaluated against metadata scalars only, never blob content."""
        with self._lock:
            scope = (tenant, namespace)
            self.admin.require(actor, tn.QUERY, scope)
            self.admin.namespace_config(tenant, namespace)
            index = self._index(scope)
            graph = self._graph(scope)
            candidates = set(index.execute(parse_query(node_predicate)).uris)
            for constraint in constraints:
                targets = set(index.execute(parse_query(constraint.target_predicate)).uris)
                survivors = set()
                for uri in candidates:
                    for edge in graph.neighbors(uri, constraint.direction, constraint.label):
                        if constraint.min_weight is not None \
                                and edge.weight < constraint.min_weight:
                            continue
                        other = edge.target if edge.source == uri else edge.source
                        if other in targets:
                            survivors.add(uri)
                            break
                candidates = survivors
                if not candidates:
                    break
            return sorted(candidates)

    # -- queries -----------------------------------------------------------------------

    def query(self, actor: tn.Principal | None, tenant: str, namespace: str,
              text: str, offset: int = 0, limit: int | None = None) -> QueryResult:
        with self._lock:
            scope = (tenant, namespace)
            self.admin.require(actor, tn.QUERY, scope)
            self.admin.namespace_config(tenant, namespace)
            expr = parse_query(text)
            return self._index(scope).execute(expr, offset=offset, limit=limit)

    # -- pipelines ------------------------------------------------------------------------

    def register_dictionary(self, actor: tn.Principal | None, tenant: str,
                            document: dict | str | bytes) -> mgm.DataDictionary:
        with self._lock:
            self.admin.require(actor, tn.SET_PIPELINE, tenant)
            compiled = mgm.compile_dictionary(document)
            self.dictionaries[compiled.id] = compiled
            return compiled

    def set_pipeline(self, actor: tn.Principal | None, tenant: str, namespace: str,
                     pipeline_id: str, document: dict | str | bytes) -> mgm.Pipeline:
        with self._lock:
            self.admin.require(actor, tn.SET_PIPELINE, tenant)
            config = self.admin.namespace_config(tenant, namespace)
            compiled = mgm.compile_pipeline(document, self.dictionaries)
            if (compiled.tenant, compiled.namespace) != (tenant, namespace):
                raise RdosError(errors.INVALID_CONFIG, "pipeline scope mismatch")
            self.pipelines[pipeline_id] = compiled
            config.pipeline = pipeline_id
            return compiled

    def _anchor_resolver(self, scope: tuple[str, str]):
        index = self._index(scope)

        def resolve(selector_text: str, join_key: str, join_value: str) -> list[str]:
            expr = And((parse_query(selector_text), Clause(join_key, "=", join_value)))
            return index.execute(expr).uris

        return resolve

    def _run_pipeline_on(self, uri: ObjectURI,
                         pipeline: mgm.Pipeline) -> tuple[mgm.PipelineResult, int, int, int]:
        """Run the pipeline against one object, persisting only what changed.

        Returns (result, annotations written, edges written, identity stages).
        Stage outputs persist in stage order; a persistence failure keeps the
        stages already persisted and skips the rest.
        """
        info = self._live_info(uri)
        blob = b"" if info.size == 0 else self._read_verified(uri, info)
        view = mgm.ObjectView.of(
            uri,
            SystemMetadata(info.size, info.created_at, info.updated_at,
                           info.digest, info.version, info.tombstone),
            blob,
            {name: MetadataPartition(name, dict(pairs))
             for name, pairs in info.partitions.items()},
        )
        result = mgm.run_pipeline(view, pipeline, self._anchor_resolver(uri.scope))
        stages = {stage.stage_id: stage for stage in pipeline.stages}
        annotations = 0
        edges = 0
        identity = sum(1 for t in result.trace if t.identity)
        for trace in result.trace:
            stage = stages[trace.stage_id]
            try:
                if trace.kind in (mgm.EXTRACT, mgm.APPLY) and not trace.identity:
                    target = stage.target_partition
                    pairs = result.annotations[target]
                    current = self._live_info(uri).partitions.get(target)
                    if current != pairs:
                        self._put_annotation(uri, MetadataPartition(target, dict(pairs)))
                        annotations += 1
                elif trace.kind == mgm.RELATE:
                    for (src, dst, label, weight) in result.edges:
                        current = self._live_info(parse_uri(src)).relations.get((label, dst))
                        if current is None or current[0] != weight:
                            self._relate(parse_uri(src), parse_uri(dst), label, weight)
                            edges += 1
            except RdosError as exc:
                raise RdosError(errors.PIPELINE_STAGE_ERROR,
                                f"stage {trace.stage_id}: {exc.message}") from exc
        return result, annotations, edges, identity

    def run_pipeline_for(self, actor: tn.Principal | None, uri: ObjectURI,
                         pipeline_id: str | None = None) -> mgm.PipelineResult:
        """Run one object through its namespace pipeline (admin operation)."""
        with self._lock:
            self.admin.require(actor, tn.BACKFILL, uri.tenant)
            config = self.admin.namespace_config(*uri.scope)
            ref = pipeline_id or config.pipeline
            pipeline = self.pipelines.get(ref) if ref else None
            if pipeline is None:
                raise RdosError(errors.INVALID_CONFIG, f"no pipeline {ref!r}")
            result, _, _, _ = self._run_pipeline_on(uri, pipeline)
            return result

    def backfill(self, actor: tn.Principal | None, tenant: str, namespace: str,
                 pipeline_id: str | None = None, cursor: str | None = None,
                 limit: int | None = None) -> BackfillReport:
        """Run the namespace pipeline over existing live objects in URI order.

        Idempotent: partitions and edges that would not change are not
        rewritten. A limited run reports the cursor to resume from.
        """
        with self._lock:
            self.admin.require(actor, tn.BACKFILL, tenant)
            config = self.admin.namespace_config(tenant, namespace)
            ref = pipeline_id or config.pipeline
            pipeline = self.pipelines.get(ref) if ref else None
            if pipeline is None:
                raise RdosError(errors.INVALID_CONFIG,
                                f"namespace {tenant}/{namespace} has no pipeline {ref!r}")
            uris = [u for u in self.refdb.live_uris(tenant, namespace)
                    if cursor is None or u > cursor]
            remaining: list[str] = []
            if limit is not None:
                remaining = uris[limit:]
                uris = uris[:limit]
            report = BackfillReport()
            for canonical in uris:
                uri = parse_uri(canonical)
                try:
                    result, annotations, edges, identity = self._run_pipeline_on(uri, pipeline)
                except RdosError as exc:
                    report.problems.append(f"{canonical}: {exc.message}")
                    continue
                report.processed += 1
                report.annotations_written += annotations
                report.edges_written += edges
                report.identity_stages += identity
                report.problems.extend(f"{canonical}: {p}" for p in result.problems)
                report.cursor = canonical
            report.done = not remaining
            return report

    # -- scavenging -----------------------------------------------------------------------

    def scavenge(self) -> tuple[ReferenceDB, ScavengeReport]:
        """Rebuild a reference DB from the sidecars on every serving node.

        For conflicting copies of one (URI, version) the highest logical
        write timestamp wins. Unreadable files become report entries, never
        errors; nodes that are down are skipped and reported.
        """
        with self._lock:
            report = ScavengeReport()
            rebuilt = ReferenceDB(self.refdb.nshards)
            rebuilt.assign_domains([n.fault_domain for n in self.nodes.values()])
            best: dict[tuple[str, int], Sidecar] = {}
            holders: dict[tuple[str, int], set[int]] = {}
            for node_id in sorted(self.nodes):
                node = self.nodes[node_id]
                if not node.alive:
                    report.skipped_nodes.append(node_id)
                    continue
                referenced: set[str] = set()
                for path in node.list_sidecar_files():
                    data = node.store.get_bytes(path)
                    try:
                        sc = parse_sidecar(data)
                    except RdosError as exc:
                        report.corrupt.append((node_id, path, exc.message))
                        continue
                    report.sidecars_read += 1
                    key = (sc.uri.canonical, sc.version)
                    holders.setdefault(key, set()).add(node_id)
                    if not sc.system.tombstone:
                        referenced.add(sc.system.content_digest)
                    current = best.get(key)
                    if current is None or sc.write_ts > current.write_ts:
                        best[key] = sc
                for blob_file in node.list_blob_files():
                    digest = blob_file.rsplit("/", 1)[-1]
                    if digest not in referenced:
                        report.orphaned.append((node_id, blob_file))
            for (canonical, version), sc in sorted(best.items()):
                entry = rebuilt.ensure(canonical)
                entry.versions[version] = VersionInfo.from_sidecar(
                    sc, tuple(sorted(holders[(canonical, version)])))
            return rebuilt, report

    def recover_from_scavenge(self) -> ScavengeReport:
        """Swap in a scavenged reference DB and rebuild all derived state."""
        with self._lock:
            rebuilt, report = self.scavenge()
            self.refdb = rebuilt
            self.indexes = {}
            self.graphs = {}
            self.live_counts = {}
            for entry in rebuilt.entries():
                uri = parse_uri(entry.uri)
                if entry.live:
                    self.live_counts[uri.scope] = self.live_counts.get(uri.scope, 0) + 1
                self._commit_index(uri, entry)
                self._sync_graph_for(uri, entry)
            return report

    # -- geo replication ----------------------------------------------------------------------

    def find_blob(self, digest: str) -> bytes | None:
        """Locate an intact copy of a blob on any serving node."""
        with self._lock:
            for node_id in sorted(self.nodes):
                node = self.nodes[node_id]
                if not node.alive:
                    continue
                try:
                    blob = node.read_blob(digest)
                except NodeDown:
                    continue
                if blob is not None and content_digest(blob) == digest:
                    return blob
            return None

    def apply_remote_entry(self, entry: ChangeLogEntry,
                           fetch_blob: Callable[[str], bytes | None]) -> bool:
        """Apply one remote change-log entry (idempotent). True if state changed."""
        with self._lock:
            self._observe(entry.stamp)
            uri = parse_uri(entry.uri)
            try:
                self.admin.namespace_config(*uri.scope)
            except RdosError as exc:
                raise RdosError(errors.REMOTE_UNAVAILABLE,
                                f"{'/'.join(uri.scope)} not configured locally") from exc
            if entry.op in (PUT_OBJECT, DELETE_OBJECT):
                return self._apply_remote_version(entry, uri, fetch_blob)
            return self._apply_remote_mutation(entry, uri)

    def _apply_remote_version(self, entry: ChangeLogEntry, uri: ObjectURI,
                              fetch_blob: Callable[[str], bytes | None]) -> bool:
        local = self.refdb.get(uri.canonical)
        existing = local.versions.get(entry.version) if local else None
        payload = entry.payload
        tombstone = entry.op == DELETE_OBJECT
        if existing is not None and entry.stamp <= existing.created_ts:
            return False

        if tombstone:
            digest, size, blob = TOMBSTONE_DIGEST, 0, None
            partitions: dict[str, dict[str, str]] = {}
        else:
            digest, size = payload["digest"], payload["size"]
            partitions = {n: dict(p) for n, p in payload["partitions"].items()}
            blob = self.find_blob(digest) or fetch_blob(digest)
            if blob is None or content_digest(blob) != digest:
                raise RdosError(errors.REMOTE_UNAVAILABLE,
                                f"blob {digest[:12]} unavailable from source")

        if existing is None:
            info = VersionInfo(
                version=entry.version, size=size,
                created_at=entry.at if tombstone else payload["created_at"],
                updated_at=entry.at if tombstone else payload["updated_at"],
                digest=digest, tombstone=tombstone,
                created_ts=entry.stamp, write_ts=entry.stamp, replicas=(),
                partitions=partitions,
                partition_ts={n: entry.stamp for n in partitions},
            )
        else:
            # A conflicting creation of the same version number: the higher
            # creation stamp decides the content; partition state merges by
            # its own per-partition stamps below.
            info = existing.copy()
            info.size = size
            info.created_at = entry.at if tombstone else payload["created_at"]
            info.digest = digest
            info.tombstone = tombstone
            info.created_ts = entry.stamp
            for name, pairs in partitions.items():
                current = max(info.partition_ts.get(name, (0, 0)),
                              info.partition_deletes.get(name, (0, 0)))
                if entry.stamp > current:
                    info.partitions[name] = pairs
                    info.partition_ts[name] = entry.stamp
                    info.partition_deletes.pop(name, None)
            if entry.stamp > info.write_ts:
                info.write_ts = entry.stamp

        owners = self._owners(uri)
        info.replicas = tuple(sorted(owners))
        was_live = bool(local and local.live)
        self._write_replicas(uri, info, blob, owners)
        target = self.refdb.ensure(uri.canonical)
        target.versions[entry.version] = info
        if target.live != was_live:
            delta = 1 if target.live else -1
            self.live_counts[uri.scope] = max(0, self.live_counts.get(uri.scope, 0) + delta)
        self._commit_index(uri, target)
        self._sync_graph_for(uri, target)
        return True

    def _apply_remote_mutation(self, entry: ChangeLogEntry, uri: ObjectURI) -> bool:
        local = self.refdb.get(uri.canonical)
        if local is None or entry.version not in local.versions:
            raise RdosError(errors.REMOTE_UNAVAILABLE,
                            f"{uri.canonical} v{entry.version} not yet replicated")
        info = local.versions[entry.version]
        payload = entry.payload
        updated = info.copy()
        changed = False
        if entry.op == PUT_ANNOTATION:
            name = payload["partition"]
            current = max(updated.partition_ts.get(name, (0, 0)),
                          updated.partition_deletes.get(name, (0, 0)))
            if entry.stamp > current:
                updated.partitions[name] = dict(payload["pairs"])
                updated.partition_ts[name] = entry.stamp
                updated.partition_deletes.pop(name, None)
                changed = True
        elif entry.op == DELETE_ANNOTATION:
            name = payload["partition"]
            current = max(updated.partition_ts.get(name, (0, 0)),
                          updated.partition_deletes.get(name, (0, 0)))
            if entry.stamp > current:
                updated.partitions.pop(name, None)
                updated.partition_ts.pop(name, None)
                updated.partition_deletes[name] = entry.stamp
                changed = True
        elif entry.op == PUT_RELATION:
            key = (payload["label"], payload["target"])
            current = updated.relations.get(key)
            if current is None or entry.stamp > current[1]:
                updated.relations[key] = (payload["weight"], entry.stamp)
                changed = True
        else:
            raise RdosError(errors.REMOTE_UNAVAILABLE, f"unknown op {entry.op!r}")
        if not changed:
            return False
        if entry.stamp > updated.write_ts:
            updated.write_ts = entry.stamp
        updated.updated_at = max(updated.updated_at, entry.at)
        self._write_replicas(uri, updated, None, updated.replicas)
        local.versions[entry.version] = updated
        self._commit_index(uri, local)
        self._sync_graph_for(uri, local)
        return True


def geo_ship(source: StorageEngine, target: StorageEngine, cursor: int) -> int:
    """Ship source change-log entries past ``cursor`` to the target cluster.

    Entries apply in sequence order; the returned cursor marks the last
    applied entry, so a failed entry is retried by the next ship. Re-shipping
    an already-applied prefix is a no-op.
    """
    for entry in source.changelog.since(cursor):
        target.apply_remote_entry(entry, source.find_blob)
        cursor = entry.seq
    return cursor
