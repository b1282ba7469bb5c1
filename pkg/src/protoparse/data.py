"""Datasets, few-shot splits, co-occurrence counts and exact-match scoring.

A dataset is a UTF-8 TSV file with one ``utterance<TAB>lf`` pair per line.
Examples are identified by their 1-based line number, which is what split
manifests store.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DataError,
    InsufficientExamplesForPredicate,
    MalformedLine,
    OracleRoundTripFailure,
    ProtoParseError,
)
from .idioms import IdiomInventory, collapse, expand_idioms, normalize_templates
from .lf import (
    DEFAULT_LEXICON,
    AtomLexicon,
    SlotAssignment,
    Template,
    Tree,
    Utterance,
    extract_template,
    fill_template,
    parse_lf,
    serialize_lf,
)
from .transition import Action, execute, oracle_actions


@dataclass(frozen=True)
class Example:
    id: int
    utterance: Utterance
    lf: Tree
    template: Template
    slots: SlotAssignment
    norm_template: Tree
    oracle: tuple[Action, ...]
    predicates: frozenset[str]

    @property
    def words(self) -> list[str]:
        return self.utterance.words


def make_example(ex_id: int, utterance: str, lf_text: str, lexicon: AtomLexicon = DEFAULT_LEXICON) -> Example:
    lf = parse_lf(lf_text)
    template, slots = extract_template(lf, lexicon)
    if fill_template(template, slots) != lf:
        raise OracleRoundTripFailure(ex_id, "template does not refill to the LF")
    oracle = tuple(oracle_actions(template.tree))
    if execute(oracle) != template.tree:
        raise OracleRoundTripFailure(ex_id, "oracle does not rebuild the template")
    return Example(ex_id, Utterance.from_text(utterance), lf, template, slots, template.tree,
                   oracle, frozenset(template.tree.heads()))


def parse_dataset(text: str, lexicon: AtomLexicon = DEFAULT_LEXICON) -> list[Example]:
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.count("\t") != 1:
            raise MalformedLine(line_no, "expected exactly one tab separator")
        utt, lf_text = line.split("\t")
        try:
            out.append(make_example(line_no, utt, lf_text, lexicon))
        except OracleRoundTripFailure:
            raise
        except ProtoParseError as exc:
            raise MalformedLine(line_no, str(exc)) from exc
    return out


def load_dataset(path: str | Path, lexicon: AtomLexicon = DEFAULT_LEXICON) -> list[Example]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset not found: {p}")
    return parse_dataset(p.read_text(encoding="utf-8"), lexicon)


def normalize_examples(examples: Sequence[Example], min_support: int, max_size: int = 8,
                       ratio: float = 1.0) -> tuple[list[Example], IdiomInventory]:
    """Mine idioms over the example templates and attach normalized
    templates and oracles."""
    normalized, inventory = normalize_templates([e.template.tree for e in examples], min_support, max_size, ratio)
    return apply_idioms(examples, inventory, normalized), inventory


def apply_idioms(examples: Sequence[Example], inventory: IdiomInventory,
                 normalized: Sequence[Tree] | None = None) -> list[Example]:
    """Collapse ``inventory``'s idioms (in mining order) in each template."""
    if normalized is None:
        normalized = []
        for e in examples:
            t = e.template.tree
            for idiom in inventory.idioms:
                t = collapse(t, idiom.pattern, idiom.symbol)
            normalized.append(t)
    out = []
    for e, t in zip(examples, normalized):
        if expand_idioms([t], inventory)[0] != e.template.tree:
            raise OracleRoundTripFailure(e.id, "idiom expansion does not restore the template")
        out.append(replace(e, norm_template=t, oracle=tuple(oracle_actions(t))))
    return out


# ---------------------------------------------------------------------------
# few-shot splits

@dataclass
class FewShotSplit:
    train: list[Example]
    support: list[Example]
    test: list[Example]
    new_predicates: tuple[str, ...]
    K: int
    seed: int = 0
    index: int = 0

    @property
    def tuning(self) -> bool:
        """The first split of a seed is kept for hyperparameter tuning."""
        return self.index == 0

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "split_index": self.index,
            "tuning": self.tuning,
            "K": self.K,
            "new_predicates": list(self.new_predicates),
            "train_ids": [e.id for e in self.train],
            "support_ids": [e.id for e in self.support],
            "test_ids": [e.id for e in self.test],
        }

    def check(self) -> None:
        """Raise DataError unless the split is sound."""
        new = set(self.new_predicates)
        for e in self.train:
            if e.predicates & new:
                raise DataError(f"train example {e.id} contains a new predicate")
        for e in self.test:
            if not e.predicates & new:
                raise DataError(f"test example {e.id} has no new predicate")
        if {e.id for e in self.support} & {e.id for e in self.test}:
            raise DataError("support and test overlap")
        for p in new:
            if sum(p in e.predicates for e in self.support) < self.K:
                raise DataError(f"support under-covers {p}")


def split_from_manifest(examples: Sequence[Example], manifest: dict) -> FewShotSplit:
    by_id = {e.id: e for e in examples}
    try:
        pick = lambda key: [by_id[i] for i in manifest[key]]  # noqa: E731
        return FewShotSplit(pick("train_ids"), pick("support_ids"), pick("test_ids"),
                            tuple(manifest["new_predicates"]), int(manifest["K"]),
                            int(manifest.get("seed", 0)), int(manifest.get("split_index", 0)))
    except KeyError as exc:
        raise DataError(f"manifest refers to unknown example or field {exc}") from None


def remove_unique_templates(examples: Sequence[Example]) -> list[Example]:
    counts = Counter(e.norm_template for e in examples)
    return [e for e in examples if counts[e.norm_template] > 1]


def candidate_new_predicates(examples: Sequence[Example], K: int, max_fraction: float = 0.5) -> list[str]:
    """Predicates with at least K + 1 examples that occur in at most
    ``max_fraction`` of the examples."""
    counts = Counter(p for e in examples for p in e.predicates)
    limit = max_fraction * len(examples)
    return sorted(p for p, c in counts.items() if c >= K + 1 and c <= limit)


def make_fewshot_splits(
    corpus: Sequence[Example],
    m_new: int,
    K: int,
    n_splits: int,
    seed: int,
    new_predicates: Sequence[str] | None = None,
    max_fraction: float = 0.5,
) -> list[FewShotSplit]:
    """Pick new predicates once, then draw ``n_splits`` support sets of K
    examples per new predicate (predicates visited in sorted order; an
    example counts for every new predicate it contains)."""
    if K < 1 or n_splits < 1:
        raise ValueError("K and n_splits must be positive")
    examples = remove_unique_templates(corpus)
    rng = np.random.default_rng(seed)
    counts = Counter(p for e in examples for p in e.predicates)
    if new_predicates is None:
        cands = candidate_new_predicates(examples, K, max_fraction)
        if len(cands) < m_new:
            short = sorted(set(counts) - set(cands))
            raise InsufficientExamplesForPredicate(
                short[0] if short else "?", f"only {len(cands)} predicates have {K + 1}+ examples")
        new = tuple(sorted(str(p) for p in rng.choice(cands, size=m_new, replace=False)))
    else:
        new = tuple(sorted(new_predicates))
        for p in new:
            if counts[p] < K + 1:
                raise InsufficientExamplesForPredicate(p, f"{counts[p]} examples, need {K + 1}")
    new_set = set(new)
    pool = [e for e in examples if e.predicates & new_set]
    train = [e for e in examples if not e.predicates & new_set]
    splits = []
    for i in range(n_splits):
        srng = np.random.default_rng([seed, i])
        chosen: list[Example] = []
        chosen_ids: set[int] = set()
        for p in new:
            have = sum(p in e.predicates for e in chosen)
            options = [e for e in pool if p in e.predicates and e.id not in chosen_ids]
            need = K - have
            if need > 0:
                if len(options) < need:
                    raise InsufficientExamplesForPredicate(p, "not enough examples left for the support set")
                for j in srng.choice(len(options), size=need, replace=False):
                    chosen.append(options[int(j)])
                    chosen_ids.add(options[int(j)].id)
        chosen.sort(key=lambda e: e.id)
        test = [e for e in pool if e.id not in chosen_ids]
        split = FewShotSplit(list(train), chosen, test, new, K, seed, i)
        split.check()
        splits.append(split)
    return splits


def write_manifest(split: FewShotSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.manifest(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# co-occurrence

@dataclass
class CooccurrenceCounts:
    """Example-level counts: how many examples contain token x, and how many
    contain token x while their oracle uses action a."""

    token: Counter = field(default_factory=Counter)
    joint: Counter = field(default_factory=Counter)

    def add(self, words: Iterable[str], action_keys: Iterable[str]) -> None:
        toks = set(words)
        acts = set(action_keys)
        for x in toks:
            self.token[x] += 1
            for a in acts:
                self.joint[(a, x)] += 1

    def merged(self, other: "CooccurrenceCounts") -> "CooccurrenceCounts":
        return CooccurrenceCounts(self.token + other.token, self.joint + other.joint)

    def prob(self, action_key: str, token: str) -> float:
        n = self.token.get(token, 0)
        return self.joint.get((action_key, token), 0) / n if n else 0.0

    def table(self) -> dict[tuple[str, str], float]:
        return {(a, x): c / self.token[x] for (a, x), c in self.joint.items()}

    def to_json(self) -> dict:
        return {
            "token": dict(sorted(self.token.items())),
            "joint": [[a, x, c] for (a, x), c in sorted(self.joint.items())],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CooccurrenceCounts":
        return cls(Counter(obj["token"]), Counter({(a, x): c for a, x, c in obj["joint"]}))


def cooccurrence_counts(examples: Iterable[Example]) -> CooccurrenceCounts:
    counts = CooccurrenceCounts()
    for e in examples:
        counts.add(e.words, (a.key for a in e.oracle))
    return counts


def cooccurrence_table(examples: Sequence[Example]) -> dict[tuple[str, str], float]:
    """P(a | x) = count(a, x) / count(x) keyed by (action key, token)."""
    if not examples:
        raise DataError("co-occurrence needs at least one example")
    return cooccurrence_counts(examples).table()


# ---------------------------------------------------------------------------
# evaluation

def exact_match(predicted: Tree | str, gold: Tree | str) -> bool:
    p = parse_lf(predicted) if isinstance(predicted, str) else predicted
    g = parse_lf(gold) if isinstance(gold, str) else gold
    return serialize_lf(p) == serialize_lf(g)


@dataclass
class EvalReport:
    exact_match_accuracy: float
    per_predicate: dict[str, float]
    counts: dict[str, int]
    per_example: dict[str, bool] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "exact_match_accuracy": self.exact_match_accuracy,
            "per_predicate": dict(sorted(self.per_predicate.items())),
            "counts": dict(sorted(self.counts.items())),
            "per_example": dict(sorted(self.per_example.items(), key=lambda kv: int(kv[0]))),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(float(obj["exact_match_accuracy"]), dict(obj["per_predicate"]),
                   dict(obj["counts"]), dict(obj.get("per_example", {})))


def evaluate(parse: Callable[[list[str]], Tree], examples: Sequence[Example],
             new_predicates: Iterable[str] = ()) -> EvalReport:
    """Exact-match accuracy of ``parse`` over ``examples``; a parse that
    raises a ProtoParseError counts as wrong."""
    new = sorted(set(new_predicates))
    hits: dict[str, bool] = {}
    for e in examples:
        try:
            ok = exact_match(parse(e.words), e.lf)
        except ProtoParseError:
            ok = False
        hits[str(e.id)] = ok
    total = len(examples)
    correct = sum(hits.values())
    per_pred, counts = {}, {"total": total, "correct": correct}
    for p in new:
        rel = [hits[str(e.id)] for e in examples if p in e.predicates]
        counts[f"n_{p}"] = len(rel)
        per_pred[p] = sum(rel) / len(rel) if rel else math.nan
    acc = correct / total if total else 0.0
    return EvalReport(acc, per_pred, counts, hits)
