"""Object data model: URIs, versions, system metadata, metadata partitions.

All types here are plain values. Mutating code copies rather than shares, so
records can be handed across threads (or into the simulator) without locks.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from . import errors
from .errors import RdosError

URI_SCHEME = "rdos"
MAX_URI_BYTES = 4096
MAX_KEY_BYTES = 256
MAX_VALUE_BYTES = 64 * 1024
DEFAULT_MAX_PARTITIONS = 8

_IDENT_RE = re.compile(r"^[a-z0-9-]{1,64}$")
_PARTITION_NAME_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")

VersionId = int


def canonical_json(value: Any) -> str:
    """Canonical JSON text: sorted keys, no insignificant whitespace, UTF-8."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_json_bytes(value: Any) -> bytes:
    return canonical_json(value).encode("utf-8")


def content_digest(blob: bytes) -> str:
    """SHA-256 of the blob, lowercase hex. The store's only content hash."""
    return hashlib.sha256(blob).hexdigest()


def hash64(value: str | bytes) -> int:
    """64-bit hash: first 8 bytes (big-endian) of SHA-256. Used for ring
    positions and shard selection so there is a single hash primitive."""
    if isinstance(value, str):
        value = value.encode("utf-8")
    return int.from_bytes(hashlib.sha256(value).digest()[:8], "big")


@dataclass(frozen=True, order=True)
class ObjectURI:
    """Identifies one object: ``rdos://<tenant>/<namespace>/<path>``."""

    tenant: str
    namespace: str
    path: str

    @property
    def canonical(self) -> str:
        return f"{URI_SCHEME}://{self.tenant}/{self.namespace}/{self.path}"

    @property
    def scope(self) -> tuple[str, str]:
        return (self.tenant, self.namespace)

    def __str__(self) -> str:
        return self.canonical


def make_uri(tenant: str, namespace: str, path: str) -> ObjectURI:
    """Validate and canonicalize the parts of an object URI.

    Canonicalization collapses repeated slashes in the path and strips one
    leading slash; dot segments are rejected rather than resolved.
    """
    if not _IDENT_RE.match(tenant):
        raise RdosError(errors.INVALID_NAME, f"bad tenant {tenant!r}")
    if not _IDENT_RE.match(namespace):
        raise RdosError(errors.INVALID_NAME, f"bad namespace {namespace!r}")
    segments = [s for s in path.split("/") if s != ""]
    if not segments:
        raise RdosError(errors.INVALID_PATH, "empty path")
    for seg in segments:
        if seg in (".", ".."):
            raise RdosError(errors.INVALID_PATH, f"dot segment in {path!r}")
    clean = "/".join(segments)
    uri = ObjectURI(tenant, namespace, clean)
    if len(uri.canonical.encode("utf-8")) > MAX_URI_BYTES:
        raise RdosError(errors.INVALID_PATH, "URI exceeds 4096 bytes")
    return uri


def parse_uri(text: str) -> ObjectURI:
    """Parse the canonical text form back into an ObjectURI."""
    prefix = f"{URI_SCHEME}://"
    if not text.startswith(prefix):
        raise RdosError(errors.INVALID_PATH, f"not a {URI_SCHEME} URI: {text!r}")
    rest = text[len(prefix):]
    parts = rest.split("/", 2)
    if len(parts) != 3:
        raise RdosError(errors.INVALID_PATH, f"URI missing path: {text!r}")
    return make_uri(parts[0], parts[1], parts[2])


@dataclass(frozen=True)
class SystemMetadata:
    """Store-maintained metadata of one object version."""

    size: int
    created_at: int  # ms since epoch
    updated_at: int  # ms since epoch
    content_digest: str
    version: VersionId
    tombstone: bool = False


@dataclass
class MetadataPartition:
    """A named, independently mutable set of key/value scalars.

    Values are always text; numeric interpretation happens in the query
    layer. A partition is replaced atomically as a unit.
    """

    name: str
    pairs: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "MetadataPartition":
        return MetadataPartition(self.name, dict(self.pairs))


@dataclass(frozen=True)
class RelationTag:
    """A directed link from the carrying object to ``target``."""

    label: str
    target: ObjectURI
    weight: float = 1.0


@dataclass
class ObjectRecord:
    """One object version: system metadata plus all custom metadata."""

    uri: ObjectURI
    system: SystemMetadata
    partitions: dict[str, MetadataPartition] = field(default_factory=dict)
    relations: list[RelationTag] = field(default_factory=list)

    def copy(self) -> "ObjectRecord":
        return ObjectRecord(
            uri=self.uri,
            system=self.system,
            partitions={n: p.copy() for n, p in self.partitions.items()},
            relations=list(self.relations),
        )


@dataclass(frozen=True)
class PartitionLimits:
    max_key_bytes: int = MAX_KEY_BYTES
    max_value_bytes: int = MAX_VALUE_BYTES


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str


def valid_partition_name(name: str) -> bool:
    return bool(_PARTITION_NAME_RE.match(name))


def validate_partition(partition: MetadataPartition,
                       limits: PartitionLimits = PartitionLimits()) -> list[Violation]:
    """Check one partition against the configured limits.

    Violations are data, not exceptions: callers decide whether to reject.
    """
    out: list[Violation] = []
    if not valid_partition_name(partition.name):
        out.append(Violation(errors.INVALID_NAME, f"bad partition name {partition.name!r}"))
    for key, value in partition.pairs.items():
        if not key:
            out.append(Violation(errors.EMPTY_KEY, "empty key"))
        elif len(key.encode("utf-8")) > limits.max_key_bytes:
            out.append(Violation(errors.KEY_TOO_LARGE, f"key {key[:32]!r}... exceeds {limits.max_key_bytes} bytes"))
        if not isinstance(value, str):
            out.append(Violation(errors.INVALID_PARTITION, f"value for {key!r} is not text"))
        elif len(value.encode("utf-8")) > limits.max_value_bytes:
            out.append(Violation(errors.VALUE_TOO_LARGE, f"value for {key!r} exceeds {limits.max_value_bytes} bytes"))
    return out


def build_partition(name: str, items: Iterable[tuple[str, str]],
                    limits: PartitionLimits = PartitionLimits()) -> tuple[MetadataPartition, list[Violation]]:
    """Build a partition from raw (key, value) items, reporting duplicates.

    Wire input (headers, documents) can carry the same key twice; the
    structural dict type cannot, so duplicate detection happens here.
    """
    violations: list[Violation] = []
    pairs: dict[str, str] = {}
    for key, value in items:
        if key in pairs:
            violations.append(Violation(errors.INVALID_PARTITION, f"duplicate key {key!r}"))
        pairs[key] = value
    partition = MetadataPartition(name, pairs)
    violations.extend(validate_partition(partition, limits))
    return partition, violations


def scalar_pairs(partitions: Iterable[MetadataPartition]) -> dict[str, set[str]]:
    """Flatten partitions into key -> set of values (a key may appear in
    several partitions with different values)."""
    out: dict[str, set[str]] = {}
    for part in partitions:
        for key, value in part.pairs.items():
            out.setdefault(key, set()).add(value)
    return out
