"""Error types shared across the store.

Every failure carries a stable machine-readable ``code`` so that callers
(and the HTTP gateway's status mapping) never have to parse messages.
"""

from __future__ import annotations


class RdosError(Exception):
    """Base error. ``code`` identifies the failure class, ``message`` explains it."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class QueryParseError(RdosError):
    """Raised on malformed query text; ``position`` is a 0-based character offset."""

    def __init__(self, message: str, position: int):
        super().__init__("PARSE_ERROR", f"{message} (at {position})")
        self.position = position


class Unauthorized(RdosError):
    def __init__(self, message: str):
        super().__init__("UNAUTHORIZED", message)


# Codes used throughout; kept in one place so the gateway mapping stays total.
INVALID_NAME = "INVALID_NAME"
INVALID_PATH = "INVALID_PATH"
INVALID_PARTITION = "INVALID_PARTITION"
VALUE_TOO_LARGE = "VALUE_TOO_LARGE"
KEY_TOO_LARGE = "KEY_TOO_LARGE"
EMPTY_KEY = "EMPTY_KEY"
NOT_FOUND = "NOT_FOUND"
GONE = "GONE"
DIGEST_MISMATCH = "DIGEST_MISMATCH"
VERSIONING_DISABLED = "VERSIONING_DISABLED"
TOO_MANY_PARTITIONS = "TOO_MANY_PARTITIONS"
PARTITION_NOT_FOUND = "PARTITION_NOT_FOUND"
INSUFFICIENT_NODES = "INSUFFICIENT_NODES"
INSUFFICIENT_REPLICAS = "INSUFFICIENT_REPLICAS"
MALFORMED_SIDECAR = "MALFORMED_SIDECAR"
MALFORMED_DICTIONARY = "MALFORMED_DICTIONARY"
MALFORMED_PIPELINE = "MALFORMED_PIPELINE"
PIPELINE_STAGE_ERROR = "PIPELINE_STAGE_ERROR"
UNKNOWN_NAMESPACE = "UNKNOWN_NAMESPACE"
UNKNOWN_TENANT = "UNKNOWN_TENANT"
UNAUTHORIZED = "UNAUTHORIZED"
PARSE_ERROR = "PARSE_ERROR"
SELF_LOOP = "SELF_LOOP"
WEIGHT_OUT_OF_RANGE = "WEIGHT_OUT_OF_RANGE"
CROSS_NAMESPACE = "CROSS_NAMESPACE"
EMPTY_GRAPH = "EMPTY_GRAPH"
DUPLICATE_ID = "DUPLICATE_ID"
INVALID_CONFIG = "INVALID_CONFIG"
QUOTA_EXCEEDED = "QUOTA_EXCEEDED"
REMOTE_UNAVAILABLE = "REMOTE_UNAVAILABLE"
SCENARIO_ERROR = "SCENARIO_ERROR"
