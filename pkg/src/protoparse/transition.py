"""GEN/REDUCE transition system over (normalized) templates.

A *unit* is an internal node or a collapsed idiom node; every unit costs one
action.  Leaves that are not idioms are *literals*: they ride along inside the
action that creates their parent.  A unit without unit children is generated
whole by ``GEN``; any other unit is assembled by ``REDUCE`` with the rule
``head :- body`` where unit children show up as ``NT`` and literals keep
their symbol.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import IncompleteParse, InapplicableAction
from .lf import HOLE, Tree, expand_tree, is_idiom_symbol, parse_lf, serialize_lf, slot_type

NT = "NT"
GEN = "gen"
REDUCE = "reduce"


def is_unit(node: Tree) -> bool:
    return bool(node.children) or is_idiom_symbol(node.symbol)


def is_terminal_unit(node: Tree) -> bool:
    return not any(is_unit(c) for c in node.children)


@dataclass(frozen=True)
class Rule:
    head: str
    body: tuple[str, ...]

    def __post_init__(self):
        if not self.head:
            raise ValueError("rule head must be non-empty")
        if self.arity < 1:
            raise ValueError("rule needs at least one NT in its body")

    @property
    def arity(self) -> int:
        return sum(1 for b in self.body if b == NT)

    def __str__(self) -> str:
        return f"{self.head} :- {' '.join(self.body)}"

    @classmethod
    def parse(cls, text: str) -> "Rule":
        head, _, body = text.partition(":-")
        return cls(head.strip(), tuple(body.split()))


@dataclass(frozen=True)
class Action:
    kind: str
    payload: Tree | Rule

    @classmethod
    def gen(cls, tree: Tree | str) -> "Action":
        return cls(GEN, parse_lf(tree) if isinstance(tree, str) else tree)

    @classmethod
    def reduce(cls, rule: Rule | str) -> "Action":
        return cls(REDUCE, Rule.parse(rule) if isinstance(rule, str) else rule)

    @property
    def is_gen(self) -> bool:
        return self.kind == GEN

    @property
    def key(self) -> str:
        if self.is_gen:
            return f"GEN {serialize_lf(self.payload)}"
        return f"REDUCE {self.payload}"

    def __str__(self) -> str:
        return self.key

    def to_json(self) -> dict:
        if self.is_gen:
            return {"kind": GEN, "payload": serialize_lf(self.payload)}
        return {"kind": REDUCE, "head": self.payload.head, "body": list(self.payload.body)}

    @classmethod
    def from_json(cls, obj: dict) -> "Action":
        if obj["kind"] == GEN:
            return cls.gen(obj["payload"])
        return cls.reduce(Rule(obj["head"], tuple(obj["body"])))

    def expanded(self, expand=None) -> Tree:
        """The produced tree fragment with idioms expanded; NT positions of a
        REDUCE appear as ``HOLE`` leaves."""
        if self.is_gen:
            tree = self.payload
        else:
            rule = self.payload
            tree = Tree(rule.head, tuple(Tree(HOLE if b == NT else b) for b in rule.body))
        return expand_tree(tree, expand) if expand is not None else tree

    def slot_sequence(self, expand=None) -> list[str]:
        """Slot types and ``NT`` markers of :meth:`expanded` in pre-order."""
        out = []
        for node in self.expanded(expand).preorder():
            if node.children:
                continue
            if node.symbol == HOLE and not self.is_gen:
                out.append(NT)
            elif slot_type(node.symbol):
                out.append(slot_type(node.symbol))
        return out

    def slot_types(self, expand=None) -> list[str]:
        return [t for t in self.slot_sequence(expand) if t != NT]


@dataclass(frozen=True)
class ParserState:
    stack: tuple[Tree, ...] = ()
    history: tuple[Action, ...] = ()
    finished: bool = False

    @property
    def done(self) -> bool:
        return self.finished

    @property
    def can_finish(self) -> bool:
        return len(self.stack) == 1 and bool(self.history) and not self.finished

    def finish(self) -> "ParserState":
        if not self.can_finish:
            raise IncompleteParse(f"cannot finish with {len(self.stack)} stack items")
        return ParserState(self.stack, self.history, True)


def _reduce_ok(stack: Sequence[Tree], rule: Rule) -> bool:
    k = rule.arity
    if len(stack) < k:
        return False
    return all(is_unit(item) for item in stack[len(stack) - k:])


def apply_action(state: ParserState, action: Action) -> ParserState:
    if state.finished:
        raise InapplicableAction("parser state is already finished")
    if action.is_gen:
        return ParserState(state.stack + (action.payload,), state.history + (action,))
    rule = action.payload
    k = rule.arity
    if len(state.stack) < k:
        raise InapplicableAction(f"stack underflow: {rule} needs {k} items, have {len(state.stack)}")
    popped = state.stack[len(state.stack) - k:]
    if not all(is_unit(item) for item in popped):
        raise InapplicableAction(f"literal leaf on stack cannot fill an NT of {rule}")
    items = iter(popped)
    children = tuple(next(items) if b == NT else Tree(b) for b in rule.body)
    node = Tree(rule.head, children)
    return ParserState(state.stack[: len(state.stack) - k] + (node,), state.history + (action,))


def execute(actions: Iterable[Action]) -> Tree:
    actions = list(actions)
    if not actions:
        raise IncompleteParse("empty action sequence")
    if not actions[0].is_gen:
        raise InapplicableAction("the first action must be GEN")
    state = ParserState()
    for a in actions:
        state = apply_action(state, a)
    if len(state.stack) != 1:
        raise IncompleteParse(f"stack holds {len(state.stack)} trees at the end")
    return state.stack[0]


def rule_of(node: Tree) -> Rule:
    return Rule(node.symbol, tuple(NT if is_unit(c) else c.symbol for c in node.children))


def oracle_actions(template: Tree) -> list[Action]:
    """Left-to-right post-order derivation of ``template``."""
    out: list[Action] = []

    def visit(node: Tree) -> None:
        if is_terminal_unit(node):
            out.append(Action(GEN, node))
            return
        for c in node.children:
            if is_unit(c):
                visit(c)
        out.append(Action(REDUCE, rule_of(node)))

    visit(template)
    return out


def extract_rules(corpus: Iterable[Tree]) -> list[Rule]:
    rules = set()
    for tree in corpus:
        for a in oracle_actions(tree):
            if not a.is_gen:
                rules.add(a.payload)
    return sorted(rules, key=lambda r: (r.head, r.body))


def action_count(template: Tree) -> int:
    return len(oracle_actions(template))


@dataclass
class ActionInventory:
    """Dense action ids plus per-action predicate sets and the new flag."""

    actions: list[Action] = field(default_factory=list)
    is_new: list[bool] = field(default_factory=list)
    predicate_of: list[frozenset[str]] = field(default_factory=list)
    expand: Callable[[str], Tree] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self._index = {a: i for i, a in enumerate(self.actions)}
        if not self.is_new:
            self.is_new = [False] * len(self.actions)
        if not self.predicate_of:
            self.predicate_of = [self._predicates(a) for a in self.actions]

    @classmethod
    def build(cls, templates: Iterable[Tree], expand=None) -> "ActionInventory":
        seen = set()
        for t in templates:
            seen.update(oracle_actions(t))
        ordered = sorted(seen, key=lambda a: (not a.is_gen, a.key))
        return cls(list(ordered), expand=expand)

    def extended(self, templates: Iterable[Tree]) -> "ActionInventory":
        """Copy with unseen actions appended and flagged new."""
        extra = set()
        for t in templates:
            for a in oracle_actions(t):
                if a not in self._index:
                    extra.add(a)
        ordered = sorted(extra, key=lambda a: (not a.is_gen, a.key))
        inv = ActionInventory(
            self.actions + ordered,
            self.is_new + [True] * len(ordered),
            self.predicate_of + [self._predicates(a) for a in ordered],
            expand=self.expand,
        )
        return inv

    def _predicates(self, action: Action) -> frozenset[str]:
        return frozenset(action.expanded(self.expand).heads())

    def __len__(self) -> int:
        return len(self.actions)

    def __contains__(self, action: Action) -> bool:
        return action in self._index

    def id_of(self, action: Action) -> int:
        return self._index[action]

    def ids(self, actions: Iterable[Action]) -> list[int]:
        return [self._index[a] for a in actions]

    @property
    def gen_ids(self) -> list[int]:
        return [i for i, a in enumerate(self.actions) if a.is_gen]

    def char_string(self, i: int) -> str:
        """Longest predicate symbol an action produces, lowercased."""
        preds = self.predicate_of[i]
        if not preds:
            return ""
        return max(sorted(preds), key=len).lower()

    def to_json(self) -> list[dict]:
        return [dict(a.to_json(), new=n) for a, n in zip(self.actions, self.is_new)]

    @classmethod
    def from_json(cls, rows: list[dict], expand=None) -> "ActionInventory":
        actions = [Action.from_json(r) for r in rows]
        return cls(actions, [bool(r.get("new", False)) for r in rows], expand=expand)


def applicable_actions(state: ParserState, inventory: ActionInventory) -> set[int]:
    if state.finished:
        return set()
    out = set()
    for i, a in enumerate(inventory.actions):
        if a.is_gen or _reduce_ok(state.stack, a.payload):
            out.add(i)
    return out


def slot_layout(actions: Sequence[Action], expand=None) -> list[tuple[int, str]]:
    """(step, slot type) for every placeholder of the built tree, in the
    pre-order of the fully expanded template."""
    stack: list[list[tuple[int, str]]] = []
    for step, a in enumerate(actions):
        seq = a.slot_sequence(expand)
        if a.is_gen:
            stack.append([(step, t) for t in seq])
            continue
        k = a.payload.arity
        if len(stack) < k:
            raise InapplicableAction("stack underflow while laying out slots")
        kids = iter(stack[len(stack) - k:])
        del stack[len(stack) - k:]
        owners: list[tuple[int, str]] = []
        for t in seq:
            if t == NT:
                owners.extend(next(kids))
            else:
                owners.append((step, t))
        stack.append(owners)
    if len(stack) != 1:
        raise IncompleteParse("action sequence does not build a single tree")
    return stack[0]


def dumps_actions(actions: Iterable[Action]) -> str:
    return "".join(json.dumps(a.to_json()) + "\n" for a in actions)


def loads_actions(text: str) -> list[Action]:
    return [Action.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
