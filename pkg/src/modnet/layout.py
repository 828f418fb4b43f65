"""Compile symbolic queries into network layouts and assemble them.

A layout is the blueprint of one dynamically built network: a tree of
module keys with wiring. The assignment of module types follows from tree
structure alone; leaves attend to the image, internal nodes re-route
attention by arity, and the root reads the final attention out into an
answer representation.

Layouts group naturally: examples whose layouts match (exactly, or up to
instance labels) can share a batch, because the assembled networks have
identical shape and tied parameters per instance.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

from .autodiff import Tensor
from .modules import (ModuleConfig, ModuleKey, combine_forward, describe_forward,
                      ensure_parameters, find_forward, measure_forward,
                      transform_forward)
from .params import ParameterStore
from .query import QueryParseError, SymbolicQuery

__all__ = [
    "LayoutNode",
    "Layout",
    "LayoutError",
    "LayoutStats",
    "layout_from_query",
    "parse_module_expr",
    "assemble",
    "group_by_layout",
    "corpus_stats",
]

MERGE_INSTANCE = "and"


class LayoutError(ValueError):
    """Query cannot be mapped to a layout, or a layout is malformed."""


@dataclass(frozen=True)
class LayoutNode:
    key: ModuleKey
    inputs: tuple["LayoutNode", ...] = ()

    def render(self) -> str:
        if not self.inputs:
            return self.key.render()
        inner = ",".join(child.render() for child in self.inputs)
        return f"{self.key.render()}({inner})"


@dataclass(frozen=True)
class Layout:
    root: LayoutNode

    @property
    def size(self) -> int:
        return sum(1 for _ in self.nodes())

    @property
    def depth(self) -> int:
        def walk(node: LayoutNode) -> int:
            return 1 + max((walk(c) for c in node.inputs), default=0)

        return walk(self.root)

    def nodes(self) -> Iterator[LayoutNode]:
        """Post-order traversal (children before parents)."""

        def walk(node: LayoutNode) -> Iterator[LayoutNode]:
            for child in node.inputs:
                yield from walk(child)
            yield node

        return walk(self.root)

    def instances(self) -> set[ModuleKey]:
        return {node.key for node in self.nodes()}

    def signature(self) -> tuple:
        """Structural identity ignoring instance labels (batching by shape)."""

        def walk(node: LayoutNode) -> tuple:
            return (node.key.module_type,) + tuple(walk(c) for c in node.inputs)

        return walk(self.root)

    def full_signature(self) -> tuple:
        def walk(node: LayoutNode) -> tuple:
            return (node.key.module_type, node.key.instance) + tuple(
                walk(c) for c in node.inputs)

        return walk(self.root)

    def render(self) -> str:
        return self.root.render()

    def __str__(self) -> str:
        return self.render()


def layout_from_query(query: SymbolicQuery, domain: str = "shapes") -> Layout:
    """Map a query tree to a layout.

    Leaves become ``find``; internal nodes become ``transform`` or
    ``combine`` by arity; the root becomes ``measure`` (shapes domain) or
    ``describe`` (vqa domain). A two-argument root first merges its
    children through an inserted ``combine[and]`` so the root always reads
    a single attention.
    """
    if domain not in ("shapes", "vqa"):
        raise LayoutError(f"unknown domain {domain!r}")

    def compile_inner(node: SymbolicQuery) -> LayoutNode:
        if node.arity == 0:
            return LayoutNode(ModuleKey("find", node.head))
        if node.arity == 1:
            return LayoutNode(ModuleKey("transform", node.head),
                              (compile_inner(node.children[0]),))
        if node.arity == 2:
            return LayoutNode(ModuleKey("combine", node.head),
                              tuple(compile_inner(c) for c in node.children))
        raise LayoutError(
            f"unsupported arity {node.arity} at {node.head!r}: at most 2 arguments")

    if query.arity == 0:
        raise LayoutError(f"root {query.head!r} has no arguments to inspect")
    if query.arity > 2:
        raise LayoutError(
            f"unsupported arity {query.arity} at root {query.head!r}")
    children = [compile_inner(c) for c in query.children]
    if len(children) == 2:
        children = [LayoutNode(ModuleKey("combine", MERGE_INSTANCE), tuple(children))]
    root_type = "measure" if domain == "shapes" else "describe"
    return Layout(LayoutNode(ModuleKey(root_type, query.head), tuple(children)))


_EXPR_TOKEN = re.compile(r"\s*([a-z][a-z0-9_-]*|\[|\]|\(|\)|,)")


def parse_module_expr(text: str) -> Layout:
    """Parse an explicit module expression like ``measure[is](find[red])``.

    This is the direct composition surface: any user can wire trained
    modules together without going through the question front end.
    """
    pos = 0

    def next_token() -> tuple[str, int]:
        nonlocal pos
        m = _EXPR_TOKEN.match(text, pos)
        if not m:
            raise QueryParseError("expected a module expression token", pos)
        pos = m.end()
        return m.group(1), m.start(1)

    def parse_node() -> LayoutNode:
        nonlocal pos
        word, at = next_token()
        if word in "[](),":
            raise QueryParseError(f"expected a module type, found {word!r}", at)
        tok, at = next_token()
        if tok != "[":
            raise QueryParseError("expected '[' after module type", at)
        instance, at = next_token()
        if instance in "[](),":
            raise QueryParseError("expected an instance label", at)
        tok, at = next_token()
        if tok != "]":
            raise QueryParseError("expected ']' after instance label", at)
        try:
            key = ModuleKey(word, instance)
        except ValueError as exc:
            raise QueryParseError(str(exc), at) from None
        children: tuple[LayoutNode, ...] = ()
        save = pos
        if _EXPR_TOKEN.match(text, pos) and _EXPR_TOKEN.match(text, pos).group(1) == "(":
            next_token()
            kids = [parse_node()]
            while True:
                tok, at = next_token()
                if tok == ",":
                    kids.append(parse_node())
                elif tok == ")":
                    break
                else:
                    raise QueryParseError("expected ',' or ')'", at)
            children = tuple(kids)
        else:
            pos = save
        return LayoutNode(key, children)

    root = parse_node()
    if text[pos:].strip():
        raise QueryParseError("trailing characters after expression", pos)
    layout = Layout(root)
    validate_layout(layout)
    return layout


def validate_layout(layout: Layout) -> None:
    """Enforce structural typing: arity and position must match module type."""
    arity = {"find": 0, "transform": 1, "combine": 2, "describe": 1, "measure": 1}

    def walk(node: LayoutNode, is_root: bool) -> None:
        t = node.key.module_type
        if len(node.inputs) != arity[t]:
            raise LayoutError(
                f"{node.key.render()} takes {arity[t]} attention input(s), "
                f"got {len(node.inputs)}")
        if t in ("describe", "measure") and not is_root:
            raise LayoutError(
                f"{node.key.render()} produces a label representation and "
                f"can only sit at the root")
        if is_root and t not in ("describe", "measure"):
            raise LayoutError(
                f"root must be describe or measure, got {node.key.render()}")
        for child in node.inputs:
            walk(child, False)

    walk(layout.root, True)


class AssembledNetwork:
    """Executable network produced from one layout.

    Calling it maps a feature-map tensor to the root's answer
    representation. Pass ``trace`` to also collect every intermediate
    attention as (node index, key, tensor) in evaluation order.
    """

    def __init__(self, layout: Layout, store: ParameterStore, config: ModuleConfig):
        self.layout = layout
        self.store = store
        self.config = config

    def __call__(self, features: Tensor,
                 trace: list[tuple[int, ModuleKey, Tensor]] | None = None) -> Tensor:
        counter = iter(range(self.layout.size))

        def run(node: LayoutNode) -> Tensor:
            children = [run(child) for child in node.inputs]
            index = next(counter)
            t = node.key.module_type
            if t == "find":
                out = find_forward(self.store, node.key.instance, features,
                                   self.config)
            elif t == "transform":
                out = transform_forward(self.store, node.key.instance, children[0],
                                        self.config)
            elif t == "combine":
                out = combine_forward(self.store, node.key.instance, children[0],
                                      children[1], self.config)
            elif t == "describe":
                out = describe_forward(self.store, node.key.instance, features,
                                       children[0], self.config)
            else:
                out = measure_forward(self.store, node.key.instance, children[0],
                                      self.config)
            if trace is not None and t in ("find", "transform", "combine"):
                trace.append((index, node.key, out))
            return out

        return run(self.layout.root)


def assemble(layout: Layout, store: ParameterStore,
             config: ModuleConfig) -> AssembledNetwork:
    """Type-check a layout and bind it to parameters (created lazily here)."""
    validate_layout(layout)
    for node in layout.nodes():
        ensure_parameters(store, node.key, config)
    return AssembledNetwork(layout, store, config)


def group_by_layout(examples: Sequence, layout_of: Callable[[object], Layout]
                    | None = None, by_shape: bool = True,
                    batch_size: int = 64) -> list[list]:
    """Partition examples into batches of structurally compatible layouts.

    Two examples share a batch iff their layouts are identical up to
    instance labels (``by_shape=True``, the default) or fully identical.
    Input order is preserved within every batch, and the concatenation of
    all batches is a permutation of the input.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    if layout_of is None:
        layout_of = lambda ex: ex[0]
    groups: dict[tuple, list] = {}
    for example in examples:
        layout = layout_of(example)
        key = layout.signature() if by_shape else layout.full_signature()
        groups.setdefault(key, []).append(example)
    batches = []
    for members in groups.values():
        for start in range(0, len(members), batch_size):
            batches.append(members[start:start + batch_size])
    return batches


@dataclass(frozen=True)
class LayoutStats:
    types: tuple[str, ...]
    instance_count: int
    layout_count: int
    max_depth: int
    max_size: int

    TSV_HEADER = "types\tinstances\tlayouts\tmax_depth\tmax_size"

    def to_tsv(self) -> str:
        row = "\t".join([", ".join(self.types), str(self.instance_count),
                         str(self.layout_count), str(self.max_depth),
                         str(self.max_size)])
        return f"{self.TSV_HEADER}\n{row}\n"


def corpus_stats(layouts: Sequence[Layout]) -> LayoutStats:
    """Exact structure statistics over a layout corpus."""
    if not layouts:
        raise ValueError("corpus_stats requires at least one layout")
    instances: set[ModuleKey] = set()
    distinct: set[tuple] = set()
    max_depth = 0
    max_size = 0
    for layout in layouts:
        instances.update(layout.instances())
        distinct.add(layout.full_signature())
        max_depth = max(max_depth, layout.depth)
        max_size = max(max_size, layout.size)
    present = {key.module_type for key in instances}
    types = tuple(t for t in ("find", "transform", "combine", "describe", "measure")
                  if t in present)
    return LayoutStats(types=types, instance_count=len(instances),
                       layout_count=len(distinct), max_depth=max_depth,
                       max_size=max_size)
