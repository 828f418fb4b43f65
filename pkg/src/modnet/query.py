"""Symbolic query trees and their textual form.

A query is a rooted tree of lower-case terms written ``head(child, ...)``,
e.g. ``is(red, above(circle))``. Whitespace is insignificant;
serialization is canonical (no spaces) and round-trips through the parser
exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

__all__ = ["SymbolicQuery", "QueryParseError", "parse_query"]

_HEAD_RE = re.compile(r"[a-z][a-z0-9_-]*")


class QueryParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SymbolicQuery:
    head: str
    children: tuple["SymbolicQuery", ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not _HEAD_RE.fullmatch(self.head):
            raise ValueError(f"bad query head {self.head!r}")

    @property
    def arity(self) -> int:
        return len(self.children)

    def serialize(self) -> str:
        if not self.children:
            return self.head
        inner = ",".join(child.serialize() for child in self.children)
        return f"{self.head}({inner})"

    def __str__(self) -> str:
        return self.serialize()


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            found = repr(self.peek()) if self.peek() else "end of input"
            raise QueryParseError(f"expected {ch!r}, found {found}", self.pos)
        self.pos += 1

    def head(self) -> str:
        m = _HEAD_RE.match(self.text, self.pos)
        if not m:
            raise QueryParseError("expected a term head", self.pos)
        self.pos = m.end()
        return m.group()


def parse_query(text: str) -> SymbolicQuery:
    """Parse ``head(child1,child2,...)`` into a tree.

    Errors carry the byte offset of the failure: unbalanced parentheses,
    an empty head, or trailing characters after the term.
    """
    scanner = _Scanner(text)
    scanner.skip_ws()
    node = _parse_term(scanner)
    scanner.skip_ws()
    if scanner.pos != len(text):
        raise QueryParseError("trailing characters after query", scanner.pos)
    return node


def _parse_term(scanner: _Scanner) -> SymbolicQuery:
    head = scanner.head()
    scanner.skip_ws()
    if scanner.peek() != "(":
        return SymbolicQuery(head)
    scanner.expect("(")
    children = []
    while True:
        scanner.skip_ws()
        children.append(_parse_term(scanner))
        scanner.skip_ws()
        if scanner.peek() == ",":
            scanner.pos += 1
            continue
        scanner.expect(")")
        return SymbolicQuery(head, tuple(children))
