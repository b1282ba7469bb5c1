"""Logical forms as ordered trees, and the template / slot-value split.

LFs are parenthesized s-expressions such as::

    (lambda $0 e (exists $1 (and (ground_transport $1) (to_city $1 atlanta:ci))))

A template replaces every entity atom by ``v_e`` and every variable name by
the shared placeholder ``v_a``.  The replaced values are kept, in pre-order,
in a :class:`SlotAssignment` so the original LF can be rebuilt exactly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import (
    EmptyExpression,
    IllegalToken,
    LFSyntaxError,
    SlotArityMismatch,
    UnbalancedParens,
    UnknownAtomCategory,
)

ENTITY_SLOT = "v_e"
VARIABLE_SLOT = "v_a"
PLACEHOLDERS = (ENTITY_SLOT, VARIABLE_SLOT)
IDIOM_PREFIX = "@"
HOLE = "*"

_CONTROL = re.compile(r"[\x00-\x08\x0b\x0c\x0e-\x1f\x7f]")


@dataclass(frozen=True, repr=False)
class Tree:
    """Immutable ordered tree node. A node without children is a leaf."""

    symbol: str
    children: tuple["Tree", ...] = ()
    _hash: int = field(init=False, repr=False, compare=False, default=0)

    def __post_init__(self):
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))
        object.__setattr__(self, "_hash", hash((self.symbol, self.children)))

    def __hash__(self) -> int:
        return self._hash

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __str__(self) -> str:
        return serialize_lf(self)

    def __repr__(self) -> str:
        return f"Tree({serialize_lf(self)!r})"

    def preorder(self) -> Iterator["Tree"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def leaves(self) -> list["Tree"]:
        return [n for n in self.preorder() if n.is_leaf]

    def size(self) -> int:
        return sum(1 for _ in self.preorder())

    def depth(self) -> int:
        if not self.children:
            return 1
        return 1 + max(c.depth() for c in self.children)

    def heads(self) -> list[str]:
        """Symbols of internal nodes in pre-order."""
        return [n.symbol for n in self.preorder() if n.children]


SemanticTree = Tree


@dataclass(frozen=True)
class Token:
    text: str
    index: int


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[Token, ...]

    @classmethod
    def from_text(cls, text: str) -> "Utterance":
        words = text.split()
        if not words:
            raise EmptyExpression("utterance has no tokens")
        return cls(tuple(Token(w, i) for i, w in enumerate(words)))

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]

    def __len__(self) -> int:
        return len(self.tokens)

    def __str__(self) -> str:
        return " ".join(self.words)


# ---------------------------------------------------------------------------
# parsing / serialization

def _tokenize(text: str) -> list[str]:
    if _CONTROL.search(text):
        raise IllegalToken("control character in logical form")
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_lf(text: str) -> Tree:
    """Parse an s-expression into a :class:`Tree`.

    ``(f a b)`` becomes a node ``f`` with leaf children ``a`` and ``b``.
    A nullary application ``(f)`` is read as the leaf ``f``.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise EmptyExpression("empty logical form")
    pos = 0

    def parse() -> Tree:
        nonlocal pos
        if pos >= len(tokens):
            raise UnbalancedParens("unexpected end of input")
        tok = tokens[pos]
        pos += 1
        if tok == ")":
            raise UnbalancedParens("unexpected ')'")
        if tok != "(":
            return Tree(tok)
        if pos >= len(tokens):
            raise UnbalancedParens("unexpected end of input")
        head = tokens[pos]
        if head == ")":
            raise EmptyExpression("empty application '()'")
        if head == "(":
            raise LFSyntaxError("application head must be an atom")
        pos += 1
        children = []
        while True:
            if pos >= len(tokens):
                raise UnbalancedParens("missing ')'")
            if tokens[pos] == ")":
                pos += 1
                break
            children.append(parse())
        return Tree(head, tuple(children))

    tree = parse()
    if pos != len(tokens):
        if ")" in tokens[pos:]:
            raise UnbalancedParens("unexpected ')'")
        raise LFSyntaxError("trailing tokens after expression")
    return tree


def serialize_lf(tree: Tree) -> str:
    """Canonical form: single spaces, spaces around every parenthesis."""
    parts: list[str] = []

    def emit(node: Tree) -> None:
        if not node.children:
            parts.append(node.symbol)
            return
        parts.append("(")
        parts.append(node.symbol)
        for child in node.children:
            emit(child)
        parts.append(")")

    emit(tree)
    return " ".join(parts)


def canonicalize(text: str) -> str:
    return serialize_lf(parse_lf(text))


# ---------------------------------------------------------------------------
# atoms and templates

@dataclass
class AtomLexicon:
    """Decides which leaves are entity atoms and which are variable names.

    Entities are leaves listed in ``entity_atoms`` or, when ``colon_entities``
    is on, leaves containing ``:``.  Variables start with ``variable_prefix``.
    If ``terms`` is given the lexicon is strict: any other leaf must be a
    listed term, otherwise :class:`UnknownAtomCategory` is raised.
    """

    entity_atoms: frozenset[str] = frozenset()
    variable_prefix: str = "$"
    colon_entities: bool = True
    terms: frozenset[str] | None = None

    def __post_init__(self):
        self.entity_atoms = frozenset(self.entity_atoms)
        if self.terms is not None:
            self.terms = frozenset(self.terms)
        clash = [a for a in self.entity_atoms if a.startswith(self.variable_prefix)]
        if clash:
            raise ValueError(f"entity atoms overlap variable pattern: {sorted(clash)[:3]}")

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "AtomLexicon":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        atoms = frozenset(line.strip() for line in lines if line.strip())
        return cls(entity_atoms=atoms, **kwargs)

    def category(self, symbol: str) -> str | None:
        """'entity', 'variable' or None for predicate terms."""
        if symbol in PLACEHOLDERS:
            return None
        if symbol in self.entity_atoms:
            return "entity"
        if symbol.startswith(self.variable_prefix):
            return "variable"
        if self.colon_entities and ":" in symbol:
            return "entity"
        if self.terms is not None and symbol not in self.terms:
            raise UnknownAtomCategory(f"leaf {symbol!r} is neither an atom nor a known term")
        return None


DEFAULT_LEXICON = AtomLexicon()


@dataclass(frozen=True)
class SlotAssignment:
    entity_values: tuple[str, ...] = ()
    variable_values: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.entity_values) + len(self.variable_values)


@dataclass(frozen=True)
class Template:
    """An abstract tree whose atoms have been replaced by placeholders."""

    tree: Tree
    slot_count_entity: int = field(init=False)
    slot_count_var: int = field(init=False)

    def __post_init__(self):
        ents, vars_ = count_slots(self.tree)
        object.__setattr__(self, "slot_count_entity", ents)
        object.__setattr__(self, "slot_count_var", vars_)

    def __str__(self) -> str:
        return serialize_lf(self.tree)


def slot_type(symbol: str) -> str | None:
    if symbol == ENTITY_SLOT:
        return "entity"
    if symbol == VARIABLE_SLOT:
        return "variable"
    return None


def count_slots(tree: Tree) -> tuple[int, int]:
    ents = vars_ = 0
    for leaf in tree.leaves():
        if leaf.symbol == ENTITY_SLOT:
            ents += 1
        elif leaf.symbol == VARIABLE_SLOT:
            vars_ += 1
    return ents, vars_


def node_kind(node: Tree, lexicon: AtomLexicon = DEFAULT_LEXICON) -> str:
    """'slot' for atoms and placeholders, 'predicate' otherwise."""
    if node.children:
        return "predicate"
    if slot_type(node.symbol) or lexicon.category(node.symbol):
        return "slot"
    return "predicate"


def partition_nodes(tree: Tree, lexicon: AtomLexicon = DEFAULT_LEXICON) -> tuple[list[Tree], list[Tree]]:
    """Split nodes into (predicate nodes, slot-value nodes), pre-order."""
    preds, slots = [], []
    for node in tree.preorder():
        (slots if node_kind(node, lexicon) == "slot" else preds).append(node)
    return preds, slots


def extract_template(tree: Tree, lexicon: AtomLexicon = DEFAULT_LEXICON) -> tuple[Template, SlotAssignment]:
    entities: list[str] = []
    variables: list[str] = []

    def walk(node: Tree) -> Tree:
        if node.children:
            return Tree(node.symbol, tuple(walk(c) for c in node.children))
        cat = lexicon.category(node.symbol)
        if cat == "entity":
            entities.append(node.symbol)
            return Tree(ENTITY_SLOT)
        if cat == "variable":
            variables.append(node.symbol)
            return Tree(VARIABLE_SLOT)
        return node

    abstract = walk(tree)
    return Template(abstract), SlotAssignment(tuple(entities), tuple(variables))


def fill_template(template: Template | Tree, slots: SlotAssignment) -> Tree:
    tree = template.tree if isinstance(template, Template) else template
    n_ent, n_var = count_slots(tree)
    if n_ent != len(slots.entity_values) or n_var != len(slots.variable_values):
        raise SlotArityMismatch(
            f"template needs {n_ent} entity / {n_var} variable values, "
            f"got {len(slots.entity_values)} / {len(slots.variable_values)}"
        )
    ents = iter(slots.entity_values)
    vars_ = iter(slots.variable_values)

    def walk(node: Tree) -> Tree:
        if node.children:
            return Tree(node.symbol, tuple(walk(c) for c in node.children))
        if node.symbol == ENTITY_SLOT:
            return Tree(next(ents))
        if node.symbol == VARIABLE_SLOT:
            return Tree(next(vars_))
        return node

    return walk(tree)


def is_idiom_symbol(symbol: str) -> bool:
    return symbol.startswith(IDIOM_PREFIX)


def expand_tree(tree: Tree, lookup) -> Tree:
    """Replace idiom nodes by their patterns, filling holes with the node's
    children in order.  ``lookup(symbol)`` returns the pattern tree and may
    raise for unknown symbols.  Holes that have no filler stay as ``HOLE``."""
    if is_idiom_symbol(tree.symbol):
        kids = [expand_tree(c, lookup) for c in tree.children]
        pattern = lookup(tree.symbol)
        it = iter(kids)

        def fill(node: Tree) -> Tree:
            if node.symbol == HOLE and not node.children:
                return next(it, node)
            if not node.children:
                return node
            return Tree(node.symbol, tuple(fill(c) for c in node.children))

        filled = fill(pattern)
        return expand_tree(filled, lookup)
    if not tree.children:
        return tree
    return Tree(tree.symbol, tuple(expand_tree(c, lookup) for c in tree.children))
