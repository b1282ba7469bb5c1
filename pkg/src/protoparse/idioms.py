"""Idiom mining and template normalization.

Patterns are tree fragments: a rooted, connected piece of a template in
which some unit children are cut off and replaced by the hole ``*``.  Literal
leaves always stay attached to their parent, so a pattern node has the same
arity as the node it matches.  Collapsing a pattern turns each occurrence
into one node ``@iN`` whose children are the subtrees that filled the holes.

The support of a pattern is the number of templates it occurs in.  A pattern
is complete when no one-step supertree (grow into a hole, or grow up to the
parent) keeps its support.  Frequent patterns are grown to that closure
before being collapsed, which also merges fixed siblings: two branches that
always co-occur under the same parent end up in the same closure.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import IncompatibleRoots, UnknownIdiomSymbol
from .lf import HOLE, IDIOM_PREFIX, Tree, expand_tree, is_idiom_symbol, parse_lf, serialize_lf
from .transition import action_count, is_unit

HOLE_LEAF = Tree(HOLE)
DEFAULT_MAX_SIZE = 8


def _as_tree(pattern: Tree | str) -> Tree:
    return parse_lf(pattern) if isinstance(pattern, str) else pattern


def pattern_size(pattern: Tree) -> int:
    """Number of non-hole nodes."""
    return sum(1 for n in pattern.preorder() if not _is_hole(n))


def pattern_units(pattern: Tree) -> int:
    return sum(1 for n in pattern.preorder() if not _is_hole(n) and is_unit(n))


def _is_hole(node: Tree) -> bool:
    return node.symbol == HOLE and not node.children


def minimal_fragment(node: Tree) -> Tree:
    """``node`` with its literal children kept and unit children cut."""
    if not node.children:
        return node
    return Tree(node.symbol, tuple(HOLE_LEAF if is_unit(c) else c for c in node.children))


def match(pattern: Tree, node: Tree, holes: list | None = None) -> bool:
    """True if ``pattern`` matches at ``node``; hole fillers go to ``holes``."""
    if _is_hole(pattern):
        if not is_unit(node):
            return False
        if holes is not None:
            holes.append(node)
        return True
    if pattern.symbol != node.symbol or len(pattern.children) != len(node.children):
        return False
    return all(match(p, c, holes) for p, c in zip(pattern.children, node.children))


def occurs_in(pattern: Tree, tree: Tree) -> bool:
    return any(match(pattern, n) for n in tree.preorder() if is_unit(n))


def subtree_support(pattern: Tree | str, corpus: Sequence[Tree]) -> int:
    pattern = _as_tree(pattern)
    return sum(1 for t in corpus if occurs_in(pattern, t))


def enumerate_fragments(node: Tree, max_size: int = DEFAULT_MAX_SIZE) -> list[Tree]:
    """All fragments rooted at ``node`` with at most ``max_size`` nodes."""
    return [f for f, _ in _fragments(node, max_size, {})]


def _fragments(node: Tree, budget: int, memo: dict) -> list[tuple[Tree, int]]:
    key = (node, budget)
    if key in memo:
        return memo[key]
    literals = [c for c in node.children if not is_unit(c)]
    base = 1 + len(literals)
    if base > budget:
        memo[key] = []
        return []
    options: list[list[tuple[Tree, int]]] = []
    for c in node.children:
        if is_unit(c):
            options.append([(HOLE_LEAF, 0)] + _fragments(c, budget - base, memo))
        else:
            options.append([(c, 0)])
    out: list[tuple[Tree, int]] = []

    def rec(i: int, used: int, acc: list):
        if i == len(options):
            out.append((Tree(node.symbol, tuple(acc)), used))
            return
        for frag, size in options[i]:
            if used + size <= budget:
                acc.append(frag)
                rec(i + 1, used + size, acc)
                acc.pop()

    rec(0, base, [])
    memo[key] = out
    return out


def _fragment_table(corpus: Sequence[Tree], max_size: int) -> dict[Tree, set[int]]:
    table: dict[Tree, set[int]] = {}
    for idx, tree in enumerate(corpus):
        memo: dict = {}
        seen = set()
        for n in tree.preorder():
            if is_unit(n):
                for frag, _ in _fragments(n, max_size, memo):
                    seen.add(frag)
        for frag in seen:
            table.setdefault(frag, set()).add(idx)
    return table


def _occurrences(pattern: Tree, corpus: Sequence[Tree], where: Iterable[int]):
    """(template idx, node, parent, child index, hole fillers) per occurrence."""
    for idx in where:
        stack: list[tuple[Tree, Tree | None, int]] = [(corpus[idx], None, -1)]
        while stack:
            node, parent, pos = stack.pop()
            holes: list = []
            if is_unit(node) and match(pattern, node, holes):
                yield idx, node, parent, pos, holes
            for i in range(len(node.children) - 1, -1, -1):
                stack.append((node.children[i], node, i))


def _replace_hole(pattern: Tree, j: int, frag: Tree) -> Tree:
    counter = itertools.count()

    def walk(n: Tree) -> Tree:
        if _is_hole(n):
            return frag if next(counter) == j else n
        if not n.children:
            return n
        return Tree(n.symbol, tuple(walk(c) for c in n.children))

    return walk(pattern)


def one_step_supertrees(pattern: Tree, corpus: Sequence[Tree], where: Iterable[int] | None = None) -> set[Tree]:
    """Every pattern obtained by growing one observed occurrence by one unit."""
    if where is None:
        where = range(len(corpus))
    out: set[Tree] = set()
    for _, node, parent, pos, holes in _occurrences(pattern, corpus, where):
        for j, filler in enumerate(holes):
            out.add(_replace_hole(pattern, j, minimal_fragment(filler)))
        if parent is not None:
            kids = tuple(
                pattern if i == pos else (HOLE_LEAF if is_unit(c) else c)
                for i, c in enumerate(parent.children)
            )
            out.add(Tree(parent.symbol, kids))
    return out


def _support_set(pattern: Tree, corpus: Sequence[Tree], where: Iterable[int]) -> set[int]:
    return {i for i in where if occurs_in(pattern, corpus[i])}


def is_complete(pattern: Tree | str, corpus: Sequence[Tree], ratio: float = 1.0) -> bool:
    """False while some one-step supertree reaches ``ratio`` times the
    pattern's support (with the default ratio: has the same support)."""
    pattern = _as_tree(pattern)
    where = _support_set(pattern, corpus, range(len(corpus)))
    if not where:
        return True
    for sup in one_step_supertrees(pattern, corpus, where):
        if len(_support_set(sup, corpus, where)) >= ratio * len(where):
            return False
    return True


def closure(pattern: Tree, corpus: Sequence[Tree], ratio: float = 1.0) -> tuple[Tree, int]:
    """Grow ``pattern`` until it is complete; returns (pattern, support)."""
    where = _support_set(pattern, corpus, range(len(corpus)))
    while True:
        best = None
        for sup in sorted(one_step_supertrees(pattern, corpus, where), key=serialize_lf):
            s = _support_set(sup, corpus, where)
            if len(s) >= ratio * len(where) and (best is None or len(s) > len(best[1])):
                best = (sup, s)
        if best is None:
            return pattern, len(where)
        pattern, where = best


def merge_patterns(a: Tree, b: Tree) -> Tree | None:
    """Union of two fragments rooted at the same node; None on conflict."""
    if _is_hole(a):
        return b
    if _is_hole(b):
        return a
    if a.symbol != b.symbol or len(a.children) != len(b.children):
        return None
    kids = []
    for x, y in zip(a.children, b.children):
        m = merge_patterns(x, y)
        if m is None:
            return None
        kids.append(m)
    return Tree(a.symbol, tuple(kids))


def fixed_sibling_test(a: Tree | str, b: Tree | str, corpus: Sequence[Tree]) -> bool:
    """Do the branches of ``a`` and ``b`` always appear together under their
    shared root?"""
    a, b = _as_tree(a), _as_tree(b)
    if (
        a.symbol != b.symbol
        or len(a.children) != len(b.children)
        or any(
            (_is_hole(x) or is_unit(x)) != (_is_hole(y) or is_unit(y))
            for x, y in zip(a.children, b.children)
        )
    ):
        raise IncompatibleRoots(f"{serialize_lf(a)} and {serialize_lf(b)} do not share a root")
    merged = merge_patterns(a, b)
    if merged is None:
        return False
    sa = subtree_support(a, corpus)
    return sa == subtree_support(b, corpus) == subtree_support(merged, corpus)


# ---------------------------------------------------------------------------
# inventory

@dataclass(frozen=True)
class Idiom:
    pattern: Tree
    support: int
    symbol: str

    @property
    def key(self) -> str:
        return serialize_lf(self.pattern)


@dataclass
class IdiomInventory:
    idioms: list[Idiom] = field(default_factory=list)
    min_support: int = 2

    def __post_init__(self):
        self._by_symbol = {i.symbol: i for i in self.idioms}
        if len(self._by_symbol) != len(self.idioms):
            raise ValueError("duplicate idiom symbols")

    def __len__(self) -> int:
        return len(self.idioms)

    def lookup(self, symbol: str) -> Tree:
        try:
            return self._by_symbol[symbol].pattern
        except KeyError:
            raise UnknownIdiomSymbol(f"unknown idiom symbol {symbol!r}") from None

    def expanded_pattern(self, symbol: str) -> Tree:
        """Pattern of ``symbol`` with nested idioms expanded (holes kept)."""
        return expand_tree(Tree(symbol, tuple(HOLE_LEAF for _ in range(_count_holes(self.lookup(symbol), self)))), self.lookup)

    def to_json(self) -> dict:
        return {
            "idioms": [{"pattern": i.key, "support": i.support, "symbol": i.symbol} for i in self.idioms],
            "min_support": self.min_support,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IdiomInventory":
        idioms = [Idiom(parse_lf(d["pattern"]), int(d["support"]), d["symbol"]) for d in obj["idioms"]]
        return cls(idioms, int(obj["min_support"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "IdiomInventory":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _count_holes(pattern: Tree, inventory: IdiomInventory) -> int:
    return sum(1 for n in pattern.preorder() if _is_hole(n))


def collapse(tree: Tree, pattern: Tree, symbol: str) -> Tree:
    """Replace every top-most occurrence of ``pattern`` by ``symbol``."""
    holes: list = []
    if is_unit(tree) and match(pattern, tree, holes):
        return Tree(symbol, tuple(collapse(h, pattern, symbol) for h in holes))
    if not tree.children:
        return tree
    return Tree(tree.symbol, tuple(collapse(c, pattern, symbol) for c in tree.children))


def expand_idioms(templates: Iterable[Tree], inventory: IdiomInventory) -> list[Tree]:
    out = []
    for t in templates:
        for n in t.preorder():
            if is_idiom_symbol(n.symbol):
                inventory.lookup(n.symbol)
        out.append(expand_tree(t, inventory.lookup))
    return out


def _fresh_symbols(corpus: Sequence[Tree]):
    used = {n.symbol for t in corpus for n in t.preorder()}
    for i in itertools.count():
        sym = f"{IDIOM_PREFIX}i{i}"
        if sym not in used:
            yield sym


def normalize_templates(
    corpus: Sequence[Tree],
    min_support: int,
    max_size: int = DEFAULT_MAX_SIZE,
    ratio: float = 1.0,
) -> tuple[list[Tree], IdiomInventory]:
    """Collapse frequent complete fragments until none is left.

    Each round takes the support levels from the top, grows every fragment
    of that support to its closure, and collapses the best closure that spans
    at least two units (largest first, then by canonical string).
    """
    if min_support < 2:
        raise ValueError("min_support must be at least 2")
    work = list(corpus)
    symbols = _fresh_symbols(work)
    idioms: list[Idiom] = []
    while True:
        table = _fragment_table(work, max_size)
        by_support: dict[int, list[Tree]] = {}
        for frag, where in table.items():
            if len(where) >= min_support:
                by_support.setdefault(len(where), []).append(frag)
        chosen = None
        for level in sorted(by_support, reverse=True):
            found: dict[Tree, int] = {}
            for frag in sorted(by_support[level], key=serialize_lf):
                closed, sup = closure(frag, work, ratio)
                if sup >= min_support and pattern_units(closed) >= 2:
                    found[closed] = sup
            if found:
                chosen = min(found.items(), key=lambda kv: (-kv[1], -pattern_size(kv[0]), serialize_lf(kv[0])))
                break
        if chosen is None:
            break
        pattern, support = chosen
        symbol = next(symbols)
        idioms.append(Idiom(pattern, support, symbol))
        work = [collapse(t, pattern, symbol) for t in work]
    return work, IdiomInventory(idioms, min_support)


def mean_action_count(templates: Iterable[Tree]) -> float:
    counts = [action_count(t) for t in templates]
    return sum(counts) / len(counts) if counts else 0.0
