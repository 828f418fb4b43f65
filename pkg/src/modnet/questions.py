"""Templated English questions over the shape world.

A closed grammar replaces a statistical parser for this synthetic domain:
every question is a yes/no sentence built from colors, shapes and spatial
relations, and maps deterministically to a symbolic query. Function words
(articles, "there", and the noun "shape") are stripped before parsing, so
"is there a red shape above a circle?" and "is a red shape above a
circle?" normalize identically.

The bare noun phrase "a shape" strips away entirely, which is what lets
chained relations ("... above a shape below a square?") compile to nested
transforms instead of a wider tree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import layout_from_query
from .params import named_seed
from .query import SymbolicQuery

__all__ = [
    "COLORS",
    "SHAPE_WORDS",
    "RELATIONS",
    "QuestionParseError",
    "Question",
    "QuestionSet",
    "parse_question",
    "enumerate_questions",
]

COLORS = ("red", "green", "blue")
SHAPE_WORDS = ("circle", "square", "triangle")
RELATIONS = ("above", "below", "left_of", "right_of")

REL_SURFACE = {
    "above": "above",
    "below": "below",
    "left_of": "left of",
    "right_of": "right of",
    "next-to": "next to",
}

FUNCTION_WORDS = frozenset({"a", "an", "the", "there", "shape"})
_SINGULAR = {"circles": "circle", "squares": "square", "triangles": "triangle",
             "shapes": "shape"}

# Default mix of question templates: all attribute questions and all
# single-relation questions fit the size window, and a handful of chained
# relation questions supply the deepest layouts.
_STRATUM_WEIGHTS = {"attr4": 36, "rel5": 144, "attr6": 54, "chain6": 10}


class QuestionParseError(ValueError):
    def __init__(self, matched: list[str], expected: str):
        prefix = " ".join(matched) if matched else "(start)"
        super().__init__(f"cannot parse question after {prefix!r}: expected {expected}")
        self.matched = list(matched)
        self.expected = expected


def normalize_tokens(text: str) -> list[str]:
    """Lower-case, drop a trailing '?', singularize, strip function words."""
    raw = text.lower().replace("?", " ").split()
    tokens = []
    for tok in raw:
        tok = _SINGULAR.get(tok, tok)
        if tok not in FUNCTION_WORDS:
            tokens.append(tok)
    return tokens


def _match_relation(tokens: list[str], i: int,
                    relations: tuple[str, ...]) -> str | None:
    for rel in relations:
        words = REL_SURFACE[rel].split()
        if tokens[i:i + len(words)] == words:
            return rel
    return None


def _np_query(tokens: list[str], matched: list[str]) -> SymbolicQuery:
    terms = COLORS + SHAPE_WORDS
    if len(tokens) == 1 and tokens[0] in terms:
        return SymbolicQuery(tokens[0])
    if (len(tokens) == 2 and tokens[0] in COLORS and tokens[1] in SHAPE_WORDS):
        return SymbolicQuery("and", (SymbolicQuery(tokens[0]),
                                     SymbolicQuery(tokens[1])))
    raise QuestionParseError(matched, "a color, a shape, or a color-shape pair")


def parse_question(text: str, relations: tuple[str, ...] = RELATIONS) -> SymbolicQuery:
    """Deterministically map a grammatical question to its query tree."""
    tokens = normalize_tokens(text)
    if not tokens or tokens[0] != "is":
        raise QuestionParseError([], "'is'")
    matched = ["is"]
    # Split the remaining tokens into noun-phrase segments separated by
    # relation markers. No relations means an attribute question.
    segments: list[list[str]] = [[]]
    rels: list[str] = []
    i = 1
    while i < len(tokens):
        rel = _match_relation(tokens, i, relations)
        if rel is not None:
            rels.append(rel)
            segments.append([])
            words = REL_SURFACE[rel].split()
            matched.extend(words)
            i += len(words)
        else:
            segments[-1].append(tokens[i])
            matched.append(tokens[i])
            i += 1

    if not rels:
        body = segments[0]
        if len(body) < 2:
            raise QuestionParseError(matched, "a subject and an attribute")
        attr = body[-1]
        if attr not in COLORS + SHAPE_WORDS:
            raise QuestionParseError(matched, "an attribute (color or shape)")
        subject = _np_query(body[:-1], matched)
        return SymbolicQuery("is", (subject, SymbolicQuery(attr)))

    if not segments[0]:
        raise QuestionParseError(["is"], "a subject noun phrase")
    if not segments[-1]:
        raise QuestionParseError(matched, "a final noun phrase")
    subject = _np_query(segments[0], matched)
    # Fold the relation chain right to left; empty middle segments are the
    # stripped wildcard "a shape" and add no constraint of their own.
    clause = SymbolicQuery(rels[-1], (_np_query(segments[-1], matched),))
    for rel, middle in zip(reversed(rels[:-1]), reversed(segments[1:-1])):
        if middle:
            clause = SymbolicQuery("and", (_np_query(middle, matched), clause))
        clause = SymbolicQuery(rel, (clause,))
    return SymbolicQuery("is", (subject, clause))


@dataclass(frozen=True)
class Question:
    text: str
    query: SymbolicQuery
    layout_size: int


@dataclass(frozen=True)
class QuestionSet:
    questions: tuple[Question, ...]
    pool_counts: dict[str, int]
    selected_counts: dict[str, int]

    def __len__(self) -> int:
        return len(self.questions)


def _simple_nps() -> list[tuple[str, SymbolicQuery]]:
    forms = [(f"a {c} shape", SymbolicQuery(c)) for c in COLORS]
    forms += [(f"a {s}", SymbolicQuery(s)) for s in SHAPE_WORDS]
    return forms


def _pair_nps() -> list[tuple[str, SymbolicQuery]]:
    return [(f"a {c} {s}", SymbolicQuery("and", (SymbolicQuery(c), SymbolicQuery(s))))
            for c in COLORS for s in SHAPE_WORDS]


def _attr_forms() -> list[tuple[str, SymbolicQuery]]:
    forms = [(c, SymbolicQuery(c)) for c in COLORS]
    forms += [(f"a {s}", SymbolicQuery(s)) for s in SHAPE_WORDS]
    return forms


def _build_pool(relations: tuple[str, ...],
                max_size: int) -> dict[str, list[Question]]:
    pool: dict[str, list[Question]] = {k: [] for k in _STRATUM_WEIGHTS}
    simple = _simple_nps()
    pairs = _pair_nps()

    def make(text: str, query: SymbolicQuery) -> Question | None:
        size = layout_from_query(query, "shapes").size
        if not 4 <= size <= max_size:
            return None
        return Question(text, query, size)

    for np_text, np_q in simple + pairs:
        for attr_text, attr_q in _attr_forms():
            q = make(f"is {np_text} {attr_text}?",
                     SymbolicQuery("is", (np_q, attr_q)))
            if q is not None:
                pool["attr4" if q.layout_size == 4 else "attr6"].append(q)
    for np1_text, np1_q in simple:
        for rel in relations:
            for np2_text, np2_q in simple:
                clause = SymbolicQuery(rel, (np2_q,))
                q = make(f"is there {np1_text} {REL_SURFACE[rel]} {np2_text}?",
                         SymbolicQuery("is", (np1_q, clause)))
                if q is not None:
                    pool["rel5"].append(q)
                for rel2 in relations:
                    chain = SymbolicQuery(rel, (SymbolicQuery(rel2, (np2_q,)),))
                    q = make(
                        f"is there {np1_text} {REL_SURFACE[rel]} a shape "
                        f"{REL_SURFACE[rel2]} {np2_text}?",
                        SymbolicQuery("is", (np1_q, chain)))
                    if q is not None:
                        pool["chain6"].append(q)
    for stratum in pool.values():
        stratum.sort(key=lambda q: q.text)
    return pool


def _apportion(count: int, pools: dict[str, list[Question]]) -> dict[str, int]:
    """Largest-remainder split of ``count`` across strata, capped by pool size."""
    weights = {k: _STRATUM_WEIGHTS[k] for k in pools}
    total_weight = sum(weights.values())
    raw = {k: count * w / total_weight for k, w in weights.items()}
    targets = {k: min(int(raw[k]), len(pools[k])) for k in pools}
    order = sorted(pools, key=lambda k: raw[k] - int(raw[k]), reverse=True)
    while sum(targets.values()) < count:
        progressed = False
        for k in order:
            if sum(targets.values()) == count:
                break
            if targets[k] < len(pools[k]):
                targets[k] += 1
                progressed = True
        if not progressed:
            break
    return targets


def enumerate_questions(count: int = 244, seed: int = 0,
                        relations: tuple[str, ...] = RELATIONS,
                        max_size: int = 6) -> QuestionSet:
    """Enumerate the question pool and select a deterministic subset.

    The pool is the exhaustive, deduplicated set of grammar realizations
    whose compiled layout size lies in [4, max_size]. Selection draws a
    seeded sample from each template stratum in fixed proportion; at the
    default count of 244 this keeps every attribute and single-relation
    question and adds ten chained-relation questions.
    """
    pools = _build_pool(relations, max_size)
    available = sum(len(p) for p in pools.values())
    if count > available:
        raise ValueError(
            f"requested {count} questions but the grammar only realizes "
            f"{available} within size [4, {max_size}]")
    targets = _apportion(count, pools)
    rng = np.random.default_rng(named_seed(seed, "questions"))
    chosen: list[Question] = []
    for name in sorted(pools):
        pool, want = pools[name], targets[name]
        if want >= len(pool):
            chosen.extend(pool)
        elif want > 0:
            picks = rng.choice(len(pool), size=want, replace=False)
            chosen.extend(pool[i] for i in sorted(picks))
    chosen.sort(key=lambda q: (q.layout_size, q.text))
    return QuestionSet(questions=tuple(chosen),
                       pool_counts={k: len(v) for k, v in pools.items()},
                       selected_counts=targets)
