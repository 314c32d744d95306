"""Data dictionaries and per-namespace metadata generation pipelines.

A pipeline is an ordered list of stages. EXTRACT stages intersect the
object's text content with a dictionary (pattern and term rules); APPLY
stages union dictionary-defined pairs onto objects matching a selector;
an optional final RELATE stage turns a shared join key into directed edges
pointing at the anchor object for each join value. A stage that produces
nothing is the identity: the object passes through unchanged.

Each stage owns one target partition and replaces it wholesale, which makes
re-running a pipeline idempotent.

Definition documents are JSON with a ``format_version`` field; see
``compile_dictionary`` and ``compile_pipeline`` for the schemas.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from typing import Callable

from . import errors
from .core import MetadataPartition, ObjectURI, SystemMetadata, valid_partition_name
from .errors import RdosError
from .query import PairView, QueryExpr, expr_matches_view, parse_query

EXTRACT = "EXTRACT"
APPLY = "APPLY"
RELATE = "RELATE"

FORMAT_VERSION = 1
BINARY_SNIFF_BYTES = 8192
SYSTEM_PSEUDO_PARTITION = "@system"


# --- tokenization -------------------------------------------------------------

def _is_token_char(ch: str) -> bool:
    if ch in "=:":
        return True
    if ch == '"':
        return True
    category = unicodedata.category(ch)
    # Letters, digits, marks stay inside tokens; punctuation and symbols split.
    return category[0] in ("L", "N", "M")


def tokenize_blob(blob: bytes) -> list[str]:
    """Token stream of a text blob; [] when the blob looks binary.

    Binary detection is a NUL byte in the first 8 KiB. Text is decoded
    permissively (UTF-8, replacement characters). Tokens split on whitespace
    and punctuation, except '=' and ':' which the pattern scanner consumes
    and '"' which delimits quoted values.
    """
    if b"\x00" in blob[:BINARY_SNIFF_BYTES]:
        return []
    text = blob.decode("utf-8", errors="replace")
    tokens: list[str] = []
    current: list[str] = []
    for ch in text:
        if _is_token_char(ch):
            current.append(ch)
        else:
            if current:
                tokens.append("".join(current))
                current = []
    if current:
        tokens.append("".join(current))
    return tokens


# --- dictionaries ---------------------------------------------------------------

@dataclass(frozen=True)
class PatternRule:
    """Scan for ``key=value`` / ``key: value`` occurrences of a key or its aliases."""

    rule_id: str
    key: str
    aliases: tuple[str, ...] = ()

    def names(self) -> set[str]:
        return {self.key.casefold(), *(a.casefold() for a in self.aliases)}


@dataclass(frozen=True)
class TermRule:
    """Emit fixed pairs when a term occurs as a token (ASCII case folded)."""

    rule_id: str
    term: str
    emit: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class Selector:
    """Apply-rule guard: URI glob over '<namespace>/<path>' and/or a predicate
    over the object's accumulated pairs (system fields under '@system')."""

    uri_glob: str | None = None
    where: str | None = None
    where_expr: QueryExpr | None = None

    def matches(self, uri: ObjectURI, view: PairView) -> bool:
        if self.uri_glob is not None:
            scoped = f"{uri.namespace}/{uri.path}"
            if not fnmatchcase(scoped, self.uri_glob):
                return False
        if self.where_expr is not None:
            if not expr_matches_view(self.where_expr, view):
                return False
        return True


@dataclass(frozen=True)
class ApplyRule:
    rule_id: str
    selector: Selector
    emit: tuple[tuple[str, str], ...]


@dataclass
class DataDictionary:
    """An ontology document: content patterns and terms mapped to metadata pairs."""

    id: str
    extract_rules: list = field(default_factory=list)  # PatternRule | TermRule
    apply_rules: list[ApplyRule] = field(default_factory=list)


def _malformed(path: str, why: str) -> RdosError:
    return RdosError(errors.MALFORMED_DICTIONARY, f"{path}: {why}")


def compile_dictionary(document: dict | str | bytes) -> DataDictionary:
    """Validate and compile a dictionary document.

    Schema::

        {"format_version": 1, "id": "...",
         "extract": [{"id", "kind": "PATTERN", "key", "aliases"?: [...]},
                     {"id", "kind": "TERM", "term", "emit": [[k, v], ...]}],
        "apply":   [{"id", "selector": {"uri_glob"?: "...", "where"?: "..."},
                     "emit": [[k, v], ...]}]}
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except ValueError as exc:
            raise _malformed("$", f"not JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise _malformed("$", "document must be an object")
    if document.get("format_version") != FORMAT_VERSION:
        raise _malformed("$.format_version", f"expected {FORMAT_VERSION}")
    dict_id = document.get("id")
    if not dict_id or not isinstance(dict_id, str):
        raise _malformed("$.id", "missing dictionary id")

    seen_ids: set[str] = set()

    def rule_id_of(row: dict, path: str) -> str:
        rid = row.get("id")
        if not rid or not isinstance(rid, str):
            raise _malformed(path, "missing rule id")
        if rid in seen_ids:
            raise _malformed(path, f"duplicate rule id {rid!r}")
        seen_ids.add(rid)
        return rid

    def emit_pairs(row: dict, path: str) -> tuple[tuple[str, str], ...]:
        raw = row.get("emit")
        if not isinstance(raw, list) or not raw:
            raise _malformed(path, "emit must be a non-empty list of [key, value]")
        pairs = []
        for i, item in enumerate(raw):
            if (not isinstance(item, (list, tuple))) or len(item) != 2:
                raise _malformed(f"{path}.emit[{i}]", "expected [key, value]")
            key, value = item
            if not isinstance(key, str) or not key:
                raise _malformed(f"{path}.emit[{i}]", "bad key")
            if not isinstance(value, str):
                raise _malformed(f"{path}.emit[{i}]", "value must be text")
            pairs.append((key, value))
        return tuple(pairs)

    extract_rules: list = []
    for i, row in enumerate(document.get("extract", [])):
        path = f"$.extract[{i}]"
        if not isinstance(row, dict):
            raise _malformed(path, "rule must be an object")
        rid = rule_id_of(row, path)
        kind = row.get("kind")
        if kind == "PATTERN":
            key = row.get("key")
            if not key or not isinstance(key, str):
                raise _malformed(path, "PATTERN rule needs a key")
            aliases = row.get("aliases", [])
            if not isinstance(aliases, list) or any(not isinstance(a, str) for a in aliases):
                raise _malformed(path, "aliases must be strings")
            extract_rules.append(PatternRule(rid, key, tuple(aliases)))
        elif kind == "TERM":
            term = row.get("term")
            if not term or not isinstance(term, str):
                raise _malformed(path, "TERM rule needs a term")
            extract_rules.append(TermRule(rid, term, emit_pairs(row, path)))
        else:
            raise _malformed(path, f"unknown kind {kind!r}")

    apply_rules: list[ApplyRule] = []
    for i, row in enumerate(document.get("apply", [])):
        path = f"$.apply[{i}]"
        if not isinstance(row, dict):
            raise _malformed(path, "rule must be an object")
        rid = rule_id_of(row, path)
        raw_selector = row.get("selector", {})
        if not isinstance(raw_selector, dict):
            raise _malformed(path, "selector must be an object")
        where = raw_selector.get("where")
        where_expr = None
        if where is not None:
            try:
                where_expr = parse_query(where)
            except RdosError as exc:
                raise _malformed(f"{path}.selector.where", exc.message) from exc
        selector = Selector(uri_glob=raw_selector.get("uri_glob"), where=where,
                            where_expr=where_expr)
        apply_rules.append(ApplyRule(rid, selector, emit_pairs(row, path)))

    return DataDictionary(id=dict_id, extract_rules=extract_rules, apply_rules=apply_rules)


# --- object view -----------------------------------------------------------------

@dataclass
class ObjectView:
    """An object as one pipeline stage sees it: identity, system metadata,
    content tokens, and the pairs accumulated so far (existing partitions
    plus anything earlier stages wrote)."""

    uri: ObjectURI
    system: SystemMetadata
    tokens: list[str]
    accumulated: dict[str, dict[str, str]] = field(default_factory=dict)

    @classmethod
    def of(cls, uri: ObjectURI, system: SystemMetadata, blob: bytes,
           partitions: dict[str, MetadataPartition]) -> "ObjectView":
        accumulated = {name: dict(p.pairs) for name, p in partitions.items()}
        return cls(uri=uri, system=system, tokens=tokenize_blob(blob), accumulated=accumulated)

    def pair_view(self) -> PairView:
        view: PairView = {name: dict(pairs) for name, pairs in self.accumulated.items()}
        view[SYSTEM_PSEUDO_PARTITION] = {
            "size": str(self.system.size),
            "version": str(self.system.version),
            "created_at": str(self.system.created_at),
            "updated_at": str(self.system.updated_at),
        }
        return view

    def absorb(self, partition: str, pairs: dict[str, str]) -> None:
        self.accumulated[partition] = dict(pairs)


# --- pipeline stages -------------------------------------------------------------

def extract(view: ObjectView, dictionary: DataDictionary) -> set[tuple[str, str]]:
    """Intersect the object's content with a dictionary.

    PATTERN rules scan the token stream for ``key=value`` tokens and
    ``key:``/``key=`` tokens followed by a value token (quoted values run to
    the closing quote); key matching is case folded, the canonical key is
    emitted. TERM rules emit their pairs when the term occurs as a token.
    Non-text blobs have no tokens, so extraction contributes nothing.
    """
    found: set[tuple[str, str]] = set()
    patterns = [r for r in dictionary.extract_rules if isinstance(r, PatternRule)]
    terms = [r for r in dictionary.extract_rules if isinstance(r, TermRule)]
    tokens = view.tokens

    def quoted_run(first: str, i: int) -> tuple[str | None, int]:
        """Quoted value starting inside token i; runs to the closing quote."""
        parts = [first]
        j = i
        while not parts[-1].endswith('"') and j + 1 < len(tokens):
            j += 1
            parts.append(tokens[j])
        value = " ".join(parts).strip('"')
        return (value or None), j + 1

    def value_at(chunk: str | None, i: int) -> tuple[str | None, int]:
        """Value from an inline chunk (after '=') or from token i onward."""
        if chunk is None:
            if i >= len(tokens):
                return None, i
            chunk = tokens[i]
        else:
            i -= 1  # chunk is part of token i-1; continuation starts at i
            if not (chunk.startswith('"') and not (len(chunk) > 1 and chunk.endswith('"'))):
                return (chunk.strip('"') or None), i + 1
            return quoted_run(chunk, i)
        if chunk.startswith('"') and not (len(chunk) > 1 and chunk.endswith('"')):
            return quoted_run(chunk, i)
        return (chunk.strip('"') or None), i + 1

    if patterns:
        wanted = {}
        for rule in patterns:
            for name in rule.names():
                wanted[name] = rule.key
        i = 0
        while i < len(tokens):
            token = tokens[i]
            key_text: str | None = None
            inline: str | None = None
            after = i + 1
            if "=" in token:
                key_text, _, rest = token.partition("=")
                inline = rest or None
            elif token.endswith(":"):
                key_text = token[:-1]
            if key_text:
                canonical = wanted.get(key_text.strip('"').casefold())
                if canonical:
                    if inline is not None:
                        value, nxt = value_at(inline, after)
                    else:
                        value, nxt = value_at(None, after)
                    if value is not None:
                        found.add((canonical, value))
                        i = nxt
                        continue
            i += 1

    if terms:
        folded = {t.casefold() for t in tokens}
        for rule in terms:
            if rule.term.casefold() in folded:
                found.update(rule.emit)
    return found


def apply(view: ObjectView, dictionary: DataDictionary) -> set[tuple[str, str]]:
    """Union contribution: pairs of every apply rule whose selector matches."""
    found: set[tuple[str, str]] = set()
    pair_view = view.pair_view()
    for rule in dictionary.apply_rules:
        if rule.selector.matches(view.uri, pair_view):
            found.update(rule.emit)
    return found


@dataclass(frozen=True)
class RelateSpec:
    """Final-stage relation tagging: objects sharing ``join_key`` point at the
    single anchor object for their join value."""

    join_key: str
    anchor_selector: str
    label: str = "RelTo"
    weight: float = 1.0


@dataclass(frozen=True)
class Stage:
    stage_id: str
    kind: str  # EXTRACT | APPLY | RELATE
    target_partition: str | None = None
    dictionary: DataDictionary | None = None
    relate: RelateSpec | None = None


@dataclass
class Pipeline:
    tenant: str
    namespace: str
    stages: list[Stage] = field(default_factory=list)


def compile_pipeline(document: dict | str | bytes,
                     dictionaries: dict[str, DataDictionary]) -> Pipeline:
    """Validate and compile a pipeline document.

    Schema::

        {"format_version": 1, "tenant": "...", "namespace": "...",
         "stages": [{"id", "kind": "EXTRACT"|"APPLY", "dictionary": "<dict id>",
                     "target_partition": "..."},
                    {"id", "kind": "RELATE", "join_key", "anchor_selector",
                     "label"?, "weight"?}]}

    At most one RELATE stage, and only as the final stage. EXTRACT/APPLY
    stages own distinct target partitions.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except ValueError as exc:
            raise RdosError(errors.MALFORMED_PIPELINE, f"not JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise RdosError(errors.MALFORMED_PIPELINE, "document must be an object")
    if document.get("format_version") != FORMAT_VERSION:
        raise RdosError(errors.MALFORMED_PIPELINE, f"format_version must be {FORMAT_VERSION}")
    tenant, namespace = document.get("tenant"), document.get("namespace")
    if not tenant or not namespace:
        raise RdosError(errors.MALFORMED_PIPELINE, "tenant and namespace are required")

    stages: list[Stage] = []
    seen_ids: set[str] = set()
    seen_partitions: set[str] = set()
    rows = document.get("stages", [])
    for i, row in enumerate(rows):
        sid = row.get("id")
        if not sid or sid in seen_ids:
            raise RdosError(errors.MALFORMED_PIPELINE, f"stage[{i}]: missing or duplicate id")
        seen_ids.add(sid)
        kind = row.get("kind")
        if kind in (EXTRACT, APPLY):
            target = row.get("target_partition")
            if not target or not valid_partition_name(target):
                raise RdosError(errors.MALFORMED_PIPELINE, f"stage[{i}]: bad target partition")
            if target in seen_partitions:
                raise RdosError(errors.MALFORMED_PIPELINE,
                                f"stage[{i}]: partition {target!r} already owned")
            seen_partitions.add(target)
            ref = row.get("dictionary")
            dictionary = dictionaries.get(ref)
            if dictionary is None:
                raise RdosError(errors.MALFORMED_PIPELINE,
                                f"stage[{i}]: unknown dictionary {ref!r}")
            stages.append(Stage(sid, kind, target_partition=target, dictionary=dictionary))
        elif kind == RELATE:
            if i != len(rows) - 1:
                raise RdosError(errors.MALFORMED_PIPELINE,
                                "RELATE is only legal as the final stage")
            join_key = row.get("join_key")
            selector = row.get("anchor_selector")
            if not join_key or not selector:
                raise RdosError(errors.MALFORMED_PIPELINE,
                                f"stage[{i}]: RELATE needs join_key and anchor_selector")
            try:
                parse_query(selector)
            except RdosError as exc:
                raise RdosError(errors.MALFORMED_PIPELINE,
                                f"stage[{i}]: bad anchor_selector: {exc.message}") from exc
            weight = float(row.get("weight", 1.0))
            if not (0.0 <= weight <= 1.0):
                raise RdosError(errors.MALFORMED_PIPELINE, f"stage[{i}]: weight outside [0, 1]")
            stages.append(Stage(sid, RELATE, relate=RelateSpec(
                join_key=join_key, anchor_selector=selector,
                label=row.get("label", "RelTo"), weight=weight)))
        else:
            raise RdosError(errors.MALFORMED_PIPELINE, f"stage[{i}]: unknown kind {kind!r}")
    return Pipeline(tenant=tenant, namespace=namespace, stages=stages)


# --- execution --------------------------------------------------------------------

@dataclass(frozen=True)
class StageTrace:
    stage_id: str
    kind: str
    identity: bool
    pairs: tuple[tuple[str, str], ...] = ()
    edges: int = 0


@dataclass
class PipelineResult:
    annotations: dict[str, dict[str, str]] = field(default_factory=dict)
    edges: list[tuple[str, str, str, float]] = field(default_factory=list)  # from,to,label,w
    trace: list[StageTrace] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)


def _collapse(pairs: set[tuple[str, str]]) -> dict[str, str]:
    # A stage can emit several values for one key; keep the smallest so the
    # written partition is deterministic.
    out: dict[str, str] = {}
    for key, value in sorted(pairs):
        out.setdefault(key, value)
    return out


AnchorResolver = Callable[[str, str, str], list[str]]
"""(anchor_selector, join_key, join_value) -> canonical URIs matching both."""


def run_pipeline(view: ObjectView, pipeline: Pipeline,
                 resolve_anchors: AnchorResolver | None = None) -> PipelineResult:
    """Run every stage in order against one object.

    EXTRACT/APPLY stages write their pair set into their own target
    partition and fold it into the accumulated view; a stage with nothing
    to say is the identity. The RELATE stage resolves the anchor for each
    of the object's join values and emits one edge per value, skipping
    values whose anchor is missing or ambiguous (reported, not fatal).
    """
    result = PipelineResult()
    for stage in pipeline.stages:
        try:
            if stage.kind in (EXTRACT, APPLY):
                fn = extract if stage.kind == EXTRACT else apply
                pairs = fn(view, stage.dictionary)
                if not pairs:
                    result.trace.append(StageTrace(stage.stage_id, stage.kind, identity=True))
                    continue
                collapsed = _collapse(pairs)
                result.annotations[stage.target_partition] = collapsed
                view.absorb(stage.target_partition, collapsed)
                result.trace.append(StageTrace(stage.stage_id, stage.kind, identity=False,
                                               pairs=tuple(sorted(collapsed.items()))))
            else:
                spec = stage.relate
                if resolve_anchors is None:
                    raise RdosError(errors.PIPELINE_STAGE_ERROR,
                                    f"stage {stage.stage_id}: no anchor resolver")
                values = sorted({value
                                 for pairs in view.pair_view().values()
                                 for key, value in pairs.items() if key == spec.join_key})
                edges = 0
                for value in values:
                    anchors = resolve_anchors(spec.anchor_selector, spec.join_key, value)
                    if len(anchors) != 1:
                        result.problems.append(
                            f"{spec.join_key}={value}: {len(anchors)} anchors, no edges emitted")
                        continue
                    anchor = anchors[0]
                    if anchor == view.uri.canonical:
                        continue
                    result.edges.append((view.uri.canonical, anchor, spec.label, spec.weight))
                    edges += 1
                result.trace.append(StageTrace(stage.stage_id, RELATE,
                                               identity=edges == 0, edges=edges))
        except RdosError as exc:
            if exc.code == errors.PIPELINE_STAGE_ERROR:
                raise
            raise RdosError(errors.PIPELINE_STAGE_ERROR,
                            f"stage {stage.stage_id}: {exc.message}") from exc
    return result
