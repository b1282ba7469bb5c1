"""Random trees and a small grammar-generated few-shot corpus.

The random generators feed property tests and the scaling checks.  The
grammar corpus mimics a flight-booking domain: every predicate has a trigger
word that resembles its name, entities are reused across templates, and the
outer ``lambda``/``exists``/``and`` scaffolding repeats so idiom mining has
something to find.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .lf import ENTITY_SLOT, VARIABLE_SLOT, Tree

_HEADS = tuple(f"p{i}" for i in range(12)) + ("and", "or", "not", "exists", "lambda", "=", "argmax")
_LITERALS = ("e", "0", "1", "i")


def random_template(rng: np.random.Generator, max_depth: int = 6, max_branching: int = 4,
                    p_internal: float = 0.45) -> Tree:
    """Random abstract tree; the root is always internal."""

    def node(depth: int, root: bool = False) -> Tree:
        if root or (depth < max_depth and rng.random() < p_internal):
            k = int(rng.integers(1, max_branching + 1))
            return Tree(str(rng.choice(_HEADS)), tuple(node(depth + 1) for _ in range(k)))
        r = rng.random()
        if r < 0.35:
            return Tree(VARIABLE_SLOT)
        if r < 0.7:
            return Tree(ENTITY_SLOT)
        return Tree(str(rng.choice(_LITERALS)))

    return node(1, root=True)


def random_lf(rng: np.random.Generator, max_depth: int = 6, max_branching: int = 4) -> Tree:
    """Random concrete LF: placeholders of a random template replaced by
    entity atoms ``name:t`` and variables ``$k``."""
    template = random_template(rng, max_depth, max_branching)

    def fill(node: Tree) -> Tree:
        if node.children:
            return Tree(node.symbol, tuple(fill(c) for c in node.children))
        if node.symbol == ENTITY_SLOT:
            return Tree(f"c{int(rng.integers(0, 20))}:{rng.choice(['ci', 'ap', 'al'])}")
        if node.symbol == VARIABLE_SLOT:
            return Tree(f"${int(rng.integers(0, 4))}")
        return node

    return fill(template)


# ---------------------------------------------------------------------------
# grammar corpus

@dataclass(frozen=True)
class _Pred:
    name: str
    words: tuple[str, ...]
    arity: str  # "v" unary on the variable, "ve" variable + entity


_PREDICATES = (
    _Pred("flight", ("flights",), "v"),
    _Pred("airline", ("airline",), "ve"),
    _Pred("from", ("from",), "ve"),
    _Pred("to", ("to",), "ve"),
    _Pred("nonstop", ("nonstop",), "v"),
    _Pred("economy", ("economy",), "v"),
    _Pred("round_trip", ("round", "trip"), "v"),
    _Pred("day_arrival", ("arriving", "day"), "ve"),
    _Pred("during_day", ("during",), "ve"),
    _Pred("aircraft_code", ("aircraft",), "ve"),
    _Pred("meal", ("meal",), "ve"),
    _Pred("stop", ("stopping",), "ve"),
)

_OPENERS = (("show", "me"), ("list",), ("i", "need"), ("give", "me", "all"))

_ENTITIES = {
    "airline": ["delta:al", "united:al", "american:al"],
    "from": ["boston:ci", "denver:ci", "dallas:ci", "atlanta:ci"],
    "to": ["boston:ci", "denver:ci", "dallas:ci", "atlanta:ci"],
    "day_arrival": ["monday:da", "friday:da"],
    "during_day": ["morning:pd", "evening:pd"],
    "aircraft_code": ["m80:ac", "b747:ac"],
    "meal": ["dinner:me", "lunch:me"],
    "stop": ["denver:ci", "dallas:ci"],
}


def _entity_word(atom: str) -> str:
    return atom.split(":")[0]


def grammar_corpus(seed: int = 0, n_templates: int = 48, per_template: int = 4,
                   max_conjuncts: int = 3, anonymize: bool = True) -> list[tuple[str, str]]:
    """(utterance, LF) pairs from ``n_templates`` distinct conjunction
    templates over twelve predicates.  Every template starts with ``flight``.

    With ``anonymize`` each entity is written as its type plus its index
    among same-typed entities of the utterance, in both the utterance and
    the LF (``from ci0 to ci1`` / ``(from $0 ci0:ci) (to $0 ci1:ci)``).
    """
    rng = np.random.default_rng(seed)
    others = [p for p in _PREDICATES if p.name != "flight"]
    combos = []
    for r in range(1, max_conjuncts):
        combos.extend(itertools.combinations(range(len(others)), r))
    order = rng.permutation(len(combos))
    chosen = [combos[i] for i in order[:n_templates]]
    # make sure every predicate shows up in at least two templates
    for pi in range(len(others)):
        if sum(pi in c for c in chosen) < 2:
            extra = [c for c in combos if pi in c and c not in chosen]
            chosen.extend(extra[: 2 - sum(pi in c for c in chosen)])
    pairs = []
    for combo in chosen:
        preds = [_PREDICATES[0]] + [others[i] for i in combo]
        for _ in range(per_template):
            words = list(_OPENERS[int(rng.integers(len(_OPENERS)))])
            conj = []
            seen_types: dict[str, int] = {}
            for p in preds:
                if p.arity == "v":
                    conj.append(f"({p.name} $0)")
                    words.extend(p.words)
                else:
                    atom = str(rng.choice(_ENTITIES[p.name]))
                    if anonymize:
                        typ = atom.split(":")[1]
                        idx = seen_types.get(typ, 0)
                        seen_types[typ] = idx + 1
                        atom = f"{typ}{idx}:{typ}"
                    conj.append(f"({p.name} $0 {atom})")
                    words.extend(p.words + (_entity_word(atom),))
            body = conj[0] if len(conj) == 1 else f"(and {' '.join(conj)})"
            pairs.append((" ".join(words), f"(lambda $0 e {body})"))
    return pairs


def grammar_tsv(seed: int = 0, **kwargs) -> str:
    return "".join(f"{u}\t{lf}\n" for u, lf in grammar_corpus(seed, **kwargs))
