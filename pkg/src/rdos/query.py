"""Predicate queries over metadata scalars, and the inverted index behind them.

Grammar (AND binds tighter than OR; keywords case-insensitive, keys and
operators case-sensitive)::

    expr   := or
    or     := and ('OR' and)*
    and    := term ('AND' term)*
    term   := 'NOT'? (clause | '(' expr ')')
    clause := key op value
    op     := '=' | '!=' | '<' | '<=' | '>' | '>=' | 'PREFIX'

Values (and keys) containing spaces or operator characters are double-quoted
with backslash escapes. A clause key containing a dot is partition-qualified:
``claim.CID`` matches key ``CID`` only inside partition ``claim``; a bare key
matches in any partition.

Scalar comparison is numeric when both sides parse as finite decimal numbers,
otherwise bytewise lexicographic on the UTF-8 encoding. A query returns
exactly the objects whose latest-version pairs satisfy the expression.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation

from .errors import QueryParseError

MAX_DEPTH = 32
MAX_CLAUSES = 256

OPS = ("=", "!=", "<", "<=", ">", ">=", "PREFIX")

# A query view of one object: partition name -> {key: value}.
PairView = dict[str, dict[str, str]]


# --- AST --------------------------------------------------------------------

@dataclass(frozen=True)
class Clause:
    key: str
    op: str
    value: str


@dataclass(frozen=True)
class And:
    children: tuple


@dataclass(frozen=True)
class Or:
    children: tuple


@dataclass(frozen=True)
class Not:
    child: object


QueryExpr = object  # Clause | And | Or | Not


# --- lexer ------------------------------------------------------------------

_WORD_STOP = set(' \t\r\n()"=!<>')


@dataclass
class _Token:
    kind: str  # WORD, STRING, OP, LPAREN, RPAREN, END
    text: str
    pos: int


def _lex(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            i += 1
        elif ch == "(":
            tokens.append(_Token("LPAREN", ch, i))
            i += 1
        elif ch == ")":
            tokens.append(_Token("RPAREN", ch, i))
            i += 1
        elif ch == '"':
            start = i
            i += 1
            out = []
            closed = False
            while i < n:
                c = text[i]
                if c == "\\" and i + 1 < n:
                    out.append(text[i + 1])
                    i += 2
                elif c == '"':
                    i += 1
                    closed = True
                    break
                else:
                    out.append(c)
                    i += 1
            if not closed:
                raise QueryParseError("unterminated string", start)
            tokens.append(_Token("STRING", "".join(out), start))
        elif ch in "=!<>":
            start = i
            if ch == "=":
                tokens.append(_Token("OP", "=", start))
                i += 1
            elif ch == "!":
                if i + 1 < n and text[i + 1] == "=":
                    tokens.append(_Token("OP", "!=", start))
                    i += 2
                else:
                    raise QueryParseError("expected '=' after '!'", start)
            else:
                if i + 1 < n and text[i + 1] == "=":
                    tokens.append(_Token("OP", ch + "=", start))
                    i += 2
                else:
                    tokens.append(_Token("OP", ch, start))
                    i += 1
        else:
            start = i
            while i < n and text[i] not in _WORD_STOP:
                i += 1
            tokens.append(_Token("WORD", text[start:i], start))
    tokens.append(_Token("END", "", n))
    return tokens


# --- parser -----------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.tokens = _lex(text)
        self.i = 0
        self.clauses = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def take(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "WORD" and tok.text.upper() == word

    def parse(self) -> QueryExpr:
        expr = self.parse_or(depth=1)
        tok = self.peek()
        if tok.kind != "END":
            raise QueryParseError(f"unexpected {tok.text!r}", tok.pos)
        return expr

    def parse_or(self, depth: int) -> QueryExpr:
        children = [self.parse_and(depth)]
        while self.keyword("OR"):
            self.take()
            children.append(self.parse_and(depth))
        return children[0] if len(children) == 1 else Or(tuple(children))

    def parse_and(self, depth: int) -> QueryExpr:
        children = [self.parse_term(depth)]
        while self.keyword("AND"):
            self.take()
            children.append(self.parse_term(depth))
        return children[0] if len(children) == 1 else And(tuple(children))

    def parse_term(self, depth: int) -> QueryExpr:
        if depth > MAX_DEPTH:
            raise QueryParseError("query too deeply nested", self.peek().pos)
        if self.keyword("NOT"):
            self.take()
            return Not(self.parse_term(depth + 1))
        tok = self.peek()
        if tok.kind == "LPAREN":
            self.take()
            expr = self.parse_or(depth + 1)
            closing = self.take()
            if closing.kind != "RPAREN":
                raise QueryParseError("expected ')'", closing.pos)
            return expr
        return self.parse_clause()

    def parse_clause(self) -> Clause:
        key_tok = self.take()
        if key_tok.kind not in ("WORD", "STRING"):
            raise QueryParseError("expected key", key_tok.pos)
        op_tok = self.take()
        if op_tok.kind == "OP":
            op = op_tok.text
        elif op_tok.kind == "WORD" and op_tok.text == "PREFIX":
            op = "PREFIX"
        else:
            raise QueryParseError("expected operator", op_tok.pos)
        value_tok = self.take()
        if value_tok.kind not in ("WORD", "STRING"):
            raise QueryParseError("expected value", value_tok.pos)
        self.clauses += 1
        if self.clauses > MAX_CLAUSES:
            raise QueryParseError("too many clauses", key_tok.pos)
        return Clause(key_tok.text, op, value_tok.text)


def parse_query(text: str) -> QueryExpr:
    """Parse query text; raises QueryParseError with a character position."""
    return _Parser(text).parse()


# --- clause semantics ---------------------------------------------------------

def _as_decimal(text: str) -> Decimal | None:
    if not text or text != text.strip():
        return None
    try:
        value = Decimal(text)
    except InvalidOperation:
        return None
    return value if value.is_finite() else None


def compare_scalars(left: str, right: str) -> int:
    """-1/0/+1 ordering: numeric when both sides are decimal, else bytewise."""
    ln, rn = _as_decimal(left), _as_decimal(right)
    if ln is not None and rn is not None:
        return -1 if ln < rn else (1 if ln > rn else 0)
    lb, rb = left.encode("utf-8"), right.encode("utf-8")
    return -1 if lb < rb else (1 if lb > rb else 0)


def value_satisfies(stored: str, op: str, wanted: str) -> bool:
    if op == "PREFIX":
        return stored.startswith(wanted)
    cmp = compare_scalars(stored, wanted)
    if op == "=":
        return cmp == 0
    if op == "!=":
        return cmp != 0
    if op == "<":
        return cmp < 0
    if op == "<=":
        return cmp <= 0
    if op == ">":
        return cmp > 0
    if op == ">=":
        return cmp >= 0
    raise ValueError(f"unknown operator {op!r}")


def split_clause_key(key: str) -> tuple[str | None, str]:
    """A dotted clause key is partition-qualified: 'part.key' -> (part, key)."""
    if "." in key:
        part, _, sub = key.partition(".")
        return part, sub
    return None, key


def clause_matches_view(clause: Clause, view: PairView) -> bool:
    part, key = split_clause_key(clause.key)
    if part is not None:
        pairs = view.get(part, {})
        stored = pairs.get(key)
        return stored is not None and value_satisfies(stored, clause.op, clause.value)
    for pairs in view.values():
        stored = pairs.get(key)
        if stored is not None and value_satisfies(stored, clause.op, clause.value):
            return True
    return False


def expr_matches_view(expr: QueryExpr, view: PairView) -> bool:
    """Direct evaluation of an expression against one object's pairs."""
    if isinstance(expr, Clause):
        return clause_matches_view(expr, view)
    if isinstance(expr, And):
        return all(expr_matches_view(c, view) for c in expr.children)
    if isinstance(expr, Or):
        return any(expr_matches_view(c, view) for c in expr.children)
    if isinstance(expr, Not):
        return not expr_matches_view(expr.child, view)
    raise TypeError(f"not a query expression: {expr!r}")


# --- inverted index -----------------------------------------------------------

@dataclass
class QueryResult:
    uris: list[str]
    snapshots: dict[str, PairView]
    total: int


class MetadataIndex:
    """Inverted index over one namespace's latest-version metadata scalars.

    Postings map key -> value text -> set of canonical URIs. Each pair is
    indexed under its bare key and its partition-qualified key, so both
    clause forms resolve without touching object records. Postings always
    reflect exactly the live (latest, non-tombstone) version of each object.
    """

    def __init__(self):
        self.postings: dict[str, dict[str, set[str]]] = {}
        self.views: dict[str, PairView] = {}

    # -- maintenance --

    def apply_upsert(self, uri: str, view: PairView) -> None:
        """Install the full pair view of an object (idempotent)."""
        self.apply_remove(uri)
        self.views[uri] = {p: dict(kv) for p, kv in view.items()}
        for part, pairs in view.items():
            for key, value in pairs.items():
                for index_key in (key, f"{part}.{key}"):
                    self.postings.setdefault(index_key, {}).setdefault(value, set()).add(uri)

    def apply_remove(self, uri: str) -> None:
        """Drop an object entirely (tombstone/delete; idempotent)."""
        view = self.views.pop(uri, None)
        if view is None:
            return
        for part, pairs in view.items():
            for key, value in pairs.items():
                for index_key in (key, f"{part}.{key}"):
                    by_value = self.postings.get(index_key)
                    if by_value is None:
                        continue
                    holders = by_value.get(value)
                    if holders is not None:
                        holders.discard(uri)
                        if not holders:
                            del by_value[value]
                    if not by_value:
                        del self.postings[index_key]

    def live_uris(self) -> set[str]:
        return set(self.views)

    # -- evaluation --

    def _clause_set(self, clause: Clause) -> set[str]:
        part, key = split_clause_key(clause.key)
        index_key = clause.key if part is not None else key
        by_value = self.postings.get(index_key, {})
        out: set[str] = set()
        for stored, holders in by_value.items():
            if value_satisfies(stored, clause.op, clause.value):
                out |= holders
        return out

    def _eval(self, expr: QueryExpr, live: set[str]) -> set[str]:
        if isinstance(expr, Clause):
            return self._clause_set(expr)
        if isinstance(expr, And):
            result: set[str] | None = None
            for child in expr.children:
                sub = self._eval(child, live)
                result = sub if result is None else (result & sub)
                if not result:
                    return set()
            return result or set()
        if isinstance(expr, Or):
            result: set[str] = set()
            for child in expr.children:
                result |= self._eval(child, live)
            return result
        if isinstance(expr, Not):
            return live - self._eval(expr.child, live)
        raise TypeError(f"not a query expression: {expr!r}")

    def execute(self, expr: QueryExpr, offset: int = 0, limit: int | None = None) -> QueryResult:
        """Evaluate against the current postings; results in canonical URI order."""
        live = self.live_uris()
        matched = sorted(self._eval(expr, live))
        total = len(matched)
        if limit is None:
            page = matched[offset:]
        else:
            page = matched[offset:offset + limit]
        snapshots = {uri: {p: dict(kv) for p, kv in self.views[uri].items()} for uri in page}
        return QueryResult(uris=page, snapshots=snapshots, total=total)
