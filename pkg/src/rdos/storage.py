"""Durable layout and bookkeeping: sidecars, node stores, reference DB, change log.

On-disk layout per node::

    <root>/blobs/<digest[0:2]>/<digest>                       content-addressed
    <root>/sidecars/<tenant>/<namespace>/<hash64 hex>/<v>.json one per version

The sidecar is the scavenger's source of truth: it carries everything needed
to rebuild the reference database entry for its (URI, version). Sidecars are
canonical JSON (sorted keys, no insignificant whitespace), so round trips are
byte-stable and replicas can be compared bit for bit.

Logical timestamps are (lamport, cluster_id) pairs. Conflicting copies of the
same logical datum resolve to the highest timestamp, ties to the higher
cluster id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import errors
from .core import (
    MetadataPartition,
    ObjectRecord,
    ObjectURI,
    RelationTag,
    SystemMetadata,
    canonical_json_bytes,
    hash64,
    make_uri,
    parse_uri,
)
from .errors import RdosError

SIDECAR_FORMAT = 1

# Logical timestamp: (lamport counter, cluster id).
Stamp = tuple[int, int]


def blob_path(digest: str) -> str:
    return f"blobs/{digest[:2]}/{digest}"


def sidecar_dir(uri: ObjectURI) -> str:
    return f"sidecars/{uri.tenant}/{uri.namespace}/{hash64(uri.canonical):016x}"


def sidecar_path(uri: ObjectURI, version: int) -> str:
    return f"{sidecar_dir(uri)}/{version}.json"


# --- node stores ------------------------------------------------------------


class NodeDown(Exception):
    """Internal: an operation touched a node that is not serving."""


class MemoryStore:
    """Dict-backed store; the simulator's durable medium."""

    def __init__(self):
        self.files: dict[str, bytes] = {}

    def put_bytes(self, path: str, data: bytes) -> None:
        self.files[path] = bytes(data)

    def get_bytes(self, path: str) -> bytes | None:
        return self.files.get(path)

    def delete(self, path: str) -> None:
        self.files.pop(path, None)

    def list_prefix(self, prefix: str) -> list[str]:
        return sorted(p for p in self.files if p.startswith(prefix))

    def wipe(self) -> None:
        self.files.clear()


class DiskStore:
    """Filesystem-backed store rooted at one directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _full(self, path: str) -> Path:
        return self.root / path

    def put_bytes(self, path: str, data: bytes) -> None:
        full = self._full(path)
        full.parent.mkdir(parents=True, exist_ok=True)
        tmp = full.with_suffix(full.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(full)

    def get_bytes(self, path: str) -> bytes | None:
        full = self._full(path)
        return full.read_bytes() if full.is_file() else None

    def delete(self, path: str) -> None:
        full = self._full(path)
        if full.is_file():
            full.unlink()

    def list_prefix(self, prefix: str) -> list[str]:
        base = self._full(prefix)
        if not base.is_dir():
            return []
        return sorted(str(p.relative_to(self.root)) for p in base.rglob("*") if p.is_file())

    def wipe(self) -> None:
        for path in self.list_prefix(""):
            self.delete(path)


class StorageNode:
    """One storage server: a store plus liveness, identity and a load figure."""

    def __init__(self, node_id: int, fault_domain: str, store=None, address: str = ""):
        self.node_id = node_id
        self.fault_domain = fault_domain
        self.store = store if store is not None else MemoryStore()
        self.address = address or f"node-{node_id}"
        self.alive = True
        self.bytes_stored = 0

    def _require_alive(self) -> None:
        if not self.alive:
            raise NodeDown(f"node {self.node_id} is down")

    def write_blob(self, digest: str, data: bytes) -> None:
        self._require_alive()
        path = blob_path(digest)
        if self.store.get_bytes(path) is None:
            self.store.put_bytes(path, data)
            self.bytes_stored += len(data)

    def read_blob(self, digest: str) -> bytes | None:
        self._require_alive()
        return self.store.get_bytes(blob_path(digest))

    def write_sidecar(self, uri: ObjectURI, version: int, payload: bytes) -> None:
        self._require_alive()
        path = sidecar_path(uri, version)
        previous = self.store.get_bytes(path)
        self.store.put_bytes(path, payload)
        self.bytes_stored += len(payload) - (len(previous) if previous else 0)

    def read_sidecar(self, uri: ObjectURI, version: int) -> bytes | None:
        self._require_alive()
        return self.store.get_bytes(sidecar_path(uri, version))

    def delete_file(self, path: str) -> None:
        self._require_alive()
        self.store.delete(path)

    def list_sidecar_files(self) -> list[str]:
        self._require_alive()
        return self.store.list_prefix("sidecars/")

    def list_blob_files(self) -> list[str]:
        self._require_alive()
        return self.store.list_prefix("blobs/")

    def crash(self) -> None:
        self.alive = False

    def restart(self) -> None:
        self.alive = True

    def permanent_failure(self) -> None:
        self.alive = False
        self.store.wipe()
        self.bytes_stored = 0


# --- sidecar format -----------------------------------------------------------


@dataclass
class Sidecar:
    """Everything persisted for one (URI, version) on one replica.

    ``created_ts`` stamps the version's creation and never changes;
    ``write_ts`` advances with every metadata mutation of the version and
    decides scavenger conflicts.
    """

    uri: ObjectURI
    version: int
    system: SystemMetadata
    partitions: dict[str, dict[str, str]] = field(default_factory=dict)
    partition_ts: dict[str, Stamp] = field(default_factory=dict)
    partition_deletes: dict[str, Stamp] = field(default_factory=dict)
    relations: dict[tuple[str, str], tuple[float, Stamp]] = field(default_factory=dict)
    created_ts: Stamp = (0, 0)
    write_ts: Stamp = (0, 0)
    writer: int = 0

    def to_record(self) -> ObjectRecord:
        parts = {name: MetadataPartition(name, dict(pairs))
                 for name, pairs in sorted(self.partitions.items())}
        rels = [RelationTag(label, parse_uri(target), weight)
                for (label, target), (weight, _ts) in sorted(self.relations.items())]
        return ObjectRecord(uri=self.uri, system=self.system, partitions=parts, relations=rels)


def serialize_sidecar(sc: Sidecar) -> bytes:
    doc = {
        "format": SIDECAR_FORMAT,
        "uri": sc.uri.canonical,
        "version": sc.version,
        "system": {
            "size": sc.system.size,
            "created_at": sc.system.created_at,
            "updated_at": sc.system.updated_at,
            "content_digest": sc.system.content_digest,
            "tombstone": sc.system.tombstone,
        },
        "partitions": {name: dict(sorted(pairs.items()))
                       for name, pairs in sc.partitions.items()},
        "partition_ts": {name: list(ts) for name, ts in sc.partition_ts.items()},
        "partition_deletes": {name: list(ts) for name, ts in sc.partition_deletes.items()},
        "relations": [
            {"label": label, "target": target, "weight": weight, "ts": list(ts)}
            for (label, target), (weight, ts) in sorted(sc.relations.items())
        ],
        "created_ts": list(sc.created_ts),
        "write_ts": list(sc.write_ts),
        "writer": sc.writer,
    }
    return canonical_json_bytes(doc)


def parse_sidecar(data: bytes) -> Sidecar:
    try:
        doc = json.loads(data.decode("utf-8"))
        uri = parse_uri(doc["uri"])
        version = doc["version"]
        system = doc["system"]
        sc = Sidecar(
            uri=uri,
            version=version,
            system=SystemMetadata(
                size=system["size"],
                created_at=system["created_at"],
                updated_at=system["updated_at"],
                content_digest=system["content_digest"],
                version=version,
                tombstone=system["tombstone"],
            ),
            partitions={name: dict(pairs) for name, pairs in doc["partitions"].items()},
            partition_ts={name: (ts[0], ts[1]) for name, ts in doc["partition_ts"].items()},
            partition_deletes={name: (ts[0], ts[1])
                               for name, ts in doc["partition_deletes"].items()},
            relations={(r["label"], r["target"]): (r["weight"], (r["ts"][0], r["ts"][1]))
                       for r in doc["relations"]},
            created_ts=(doc["created_ts"][0], doc["created_ts"][1]),
            write_ts=(doc["write_ts"][0], doc["write_ts"][1]),
            writer=doc["writer"],
        )
    except (ValueError, KeyError, TypeError, IndexError, AttributeError,
            UnicodeDecodeError, RdosError) as exc:
        raise RdosError(errors.MALFORMED_SIDECAR, f"cannot parse sidecar: {exc}") from exc
    if not isinstance(sc.version, int) or sc.version < 1:
        raise RdosError(errors.MALFORMED_SIDECAR, f"bad version {sc.version!r}")
    if len(sc.system.content_digest) != 64:
        raise RdosError(errors.MALFORMED_SIDECAR, "bad digest length")
    if sc.system.updated_at < sc.system.created_at:
        raise RdosError(errors.MALFORMED_SIDECAR, "updated_at precedes created_at")
    if sc.system.tombstone and sc.system.size != 0:
        raise RdosError(errors.MALFORMED_SIDECAR, "tombstone with nonzero size")
    return sc


# --- reference database -------------------------------------------------------


@dataclass
class VersionInfo:
    """Reference-DB row for one version: mirrors the sidecar plus replica set."""

    version: int
    size: int
    created_at: int
    updated_at: int
    digest: str
    tombstone: bool
    created_ts: Stamp
    write_ts: Stamp
    replicas: tuple[int, ...]
    partitions: dict[str, dict[str, str]] = field(default_factory=dict)
    partition_ts: dict[str, Stamp] = field(default_factory=dict)
    partition_deletes: dict[str, Stamp] = field(default_factory=dict)
    relations: dict[tuple[str, str], tuple[float, Stamp]] = field(default_factory=dict)

    def copy(self) -> "VersionInfo":
        return replace(
            self,
            partitions={n: dict(p) for n, p in self.partitions.items()},
            partition_ts=dict(self.partition_ts),
            partition_deletes=dict(self.partition_deletes),
            relations=dict(self.relations),
        )

    def to_sidecar(self, uri: ObjectURI, writer: int) -> Sidecar:
        return Sidecar(
            uri=uri,
            version=self.version,
            system=SystemMetadata(
                size=self.size,
                created_at=self.created_at,
                updated_at=self.updated_at,
                content_digest=self.digest,
                version=self.version,
                tombstone=self.tombstone,
            ),
            partitions={n: dict(p) for n, p in self.partitions.items()},
            partition_ts=dict(self.partition_ts),
            partition_deletes=dict(self.partition_deletes),
            relations=dict(self.relations),
            created_ts=self.created_ts,
            write_ts=self.write_ts,
            writer=writer,
        )

    @classmethod
    def from_sidecar(cls, sc: Sidecar, replicas: tuple[int, ...]) -> "VersionInfo":
        return cls(
            version=sc.version,
            size=sc.system.size,
            created_at=sc.system.created_at,
            updated_at=sc.system.updated_at,
            digest=sc.system.content_digest,
            tombstone=sc.system.tombstone,
            created_ts=sc.created_ts,
            write_ts=sc.write_ts,
            replicas=replicas,
            partitions={n: dict(p) for n, p in sc.partitions.items()},
            partition_ts=dict(sc.partition_ts),
            partition_deletes=dict(sc.partition_deletes),
            relations=dict(sc.relations),
        )


@dataclass
class RefEntry:
    """All versions of one URI."""

    uri: str  # canonical text
    versions: dict[int, VersionInfo] = field(default_factory=dict)

    @property
    def latest(self) -> int:
        return max(self.versions)

    @property
    def latest_info(self) -> VersionInfo:
        return self.versions[self.latest]

    @property
    def live(self) -> bool:
        return bool(self.versions) and not self.latest_info.tombstone


class ReferenceDB:
    """Sharded map of canonical URI -> RefEntry.

    Shards are selected by hash64 of the URI. ``shard_domains`` records which
    fault domain hosts each shard (informational placement, assigned
    round-robin over the distinct domains present).
    """

    def __init__(self, nshards: int = 16):
        self.nshards = nshards
        self.shards: list[dict[str, RefEntry]] = [{} for _ in range(nshards)]
        self.shard_domains: list[str] = []

    def assign_domains(self, domains: list[str]) -> None:
        unique = sorted(set(domains))
        self.shard_domains = [unique[i % len(unique)] for i in range(self.nshards)] if unique else []

    def shard_of(self, uri: str) -> int:
        return hash64(uri) % self.nshards

    def get(self, uri: str) -> RefEntry | None:
        return self.shards[self.shard_of(uri)].get(uri)

    def ensure(self, uri: str) -> RefEntry:
        shard = self.shards[self.shard_of(uri)]
        entry = shard.get(uri)
        if entry is None:
            entry = RefEntry(uri=uri)
            shard[uri] = entry
        return entry

    def entries(self):
        for shard in self.shards:
            for uri in sorted(shard):
                yield shard[uri]

    def live_uris(self, tenant: str | None = None, namespace: str | None = None) -> list[str]:
        prefix = None
        if tenant is not None and namespace is not None:
            prefix = f"rdos://{tenant}/{namespace}/"
        out = []
        for entry in self.entries():
            if entry.live and (prefix is None or entry.uri.startswith(prefix)):
                out.append(entry.uri)
        return sorted(out)

    def equal_to(self, other: "ReferenceDB") -> bool:
        return self.diff(other) == []

    def diff(self, other: "ReferenceDB") -> list[str]:
        """Field-for-field comparison; returns human-readable differences."""
        problems: list[str] = []
        mine = {e.uri: e for e in self.entries()}
        theirs = {e.uri: e for e in other.entries()}
        for uri in sorted(set(mine) | set(theirs)):
            a, b = mine.get(uri), theirs.get(uri)
            if a is None or b is None:
                problems.append(f"{uri}: present in one side only")
                continue
            if self.shard_of(uri) != other.shard_of(uri) and self.nshards == other.nshards:
                problems.append(f"{uri}: shard mismatch")
            if set(a.versions) != set(b.versions):
                problems.append(f"{uri}: version sets differ {sorted(a.versions)} vs {sorted(b.versions)}")
                continue
            for v in sorted(a.versions):
                if a.versions[v] != b.versions[v]:
                    problems.append(f"{uri} v{v}: fields differ")
        return problems


# --- change log ----------------------------------------------------------------

PUT_OBJECT = "PUT_OBJECT"
PUT_ANNOTATION = "PUT_ANNOTATION"
DELETE_ANNOTATION = "DELETE_ANNOTATION"
DELETE_OBJECT = "DELETE_OBJECT"
PUT_RELATION = "PUT_RELATION"

CHANGE_OPS = (PUT_OBJECT, PUT_ANNOTATION, DELETE_ANNOTATION, DELETE_OBJECT, PUT_RELATION)


@dataclass(frozen=True)
class ChangeLogEntry:
    seq: int
    op: str
    uri: str
    version: int
    payload: dict
    stamp: Stamp
    at: int  # wall/virtual ms

    def to_doc(self) -> dict:
        return {
            "seq": self.seq,
            "op": self.op,
            "uri": self.uri,
            "version": self.version,
            "payload": self.payload,
            "stamp": list(self.stamp),
            "at": self.at,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ChangeLogEntry":
        return cls(
            seq=doc["seq"],
            op=doc["op"],
            uri=doc["uri"],
            version=doc["version"],
            payload=doc["payload"],
            stamp=(doc["stamp"][0], doc["stamp"][1]),
            at=doc["at"],
        )


class ChangeLog:
    """Per-cluster append-only operation log with gapless sequence numbers.

    File form is a stream of length-prefixed canonical JSON entries
    (4-byte big-endian length, then the entry bytes).
    """

    def __init__(self, cluster_id: int):
        self.cluster_id = cluster_id
        self.entries: list[ChangeLogEntry] = []

    @property
    def latest_seq(self) -> int:
        return len(self.entries)

    def append(self, op: str, uri: str, version: int, payload: dict,
               stamp: Stamp, at: int) -> ChangeLogEntry:
        if op not in CHANGE_OPS:
            raise ValueError(f"unknown change op {op!r}")
        entry = ChangeLogEntry(seq=len(self.entries) + 1, op=op, uri=uri,
                               version=version, payload=payload, stamp=stamp, at=at)
        self.entries.append(entry)
        return entry

    def since(self, cursor: int) -> list[ChangeLogEntry]:
        """Entries with seq > cursor, in order."""
        return self.entries[cursor:]

    def dump_bytes(self) -> bytes:
        out = bytearray()
        for entry in self.entries:
            body = canonical_json_bytes(entry.to_doc())
            out += len(body).to_bytes(4, "big") + body
        return bytes(out)

    @classmethod
    def load_bytes(cls, cluster_id: int, data: bytes) -> "ChangeLog":
        log = cls(cluster_id)
        i = 0
        while i < len(data):
            if i + 4 > len(data):
                raise RdosError(errors.MALFORMED_SIDECAR, "truncated change log")
            length = int.from_bytes(data[i:i + 4], "big")
            body = data[i + 4:i + 4 + length]
            if len(body) != length:
                raise RdosError(errors.MALFORMED_SIDECAR, "truncated change log entry")
            entry = ChangeLogEntry.from_doc(json.loads(body.decode("utf-8")))
            if entry.seq != len(log.entries) + 1:
                raise RdosError(errors.MALFORMED_SIDECAR, f"sequence gap at {entry.seq}")
            log.entries.append(entry)
            i += 4 + length
        return log
