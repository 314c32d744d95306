"""rdos: a relational distributed object store.

Replicated, multi-tenant objects whose metadata lives in named partitions,
enriched by per-namespace generation pipelines, related through a weighted
directed graph, and queryable by exact predicate search. A deterministic
simulation harness exercises the durability and consistency contracts.
"""

from .core import (
    MetadataPartition,
    ObjectRecord,
    ObjectURI,
    RelationTag,
    SystemMetadata,
    content_digest,
    hash64,
    make_uri,
    parse_uri,
    validate_partition,
)
from .errors import RdosError

__version__ = "0.1.0"

__all__ = [
    "MetadataPartition",
    "ObjectRecord",
    "ObjectURI",
    "RdosError",
    "RelationTag",
    "SystemMetadata",
    "content_digest",
    "hash64",
    "make_uri",
    "parse_uri",
    "validate_partition",
    "__version__",
]
