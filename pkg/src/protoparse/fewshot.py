"""Few-shot training: prototypes, predicate-dropout meta batches, the
attention regularizer, pre-training and prototype-initialized fine-tuning.

Pre-training alternates two kinds of batches over a global batch counter.
Even batches minimise the supervised loss ``L_s + lam * Omega`` with the
smoothing constant ``k`` in the action softmax.  Odd batches are meta
batches: a random subset of the batch's predicates is treated as new, the
embeddings of the actions producing them are replaced by prototypes built
from a meta-support half of the batch, and the loss is measured on the
meta-test half.

Fine-tuning appends rows for unseen actions, initialises each from the mean
fused decoder state at the support steps where it is the gold action, then
minimises ``L_s + lam * Omega`` on the support set without smoothing.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CooccurrenceCounts, Example, cooccurrence_counts
from .errors import (
    BatchTooSmall,
    ConfigError,
    EmptySupportStates,
    EmptyTrainSet,
    MissingPrototype,
    UncoveredNewAction,
)
from .idioms import IdiomInventory
from .model import STOP, Instance, ModelConfig, ParserModel, Trace
from .transition import ActionInventory

SEED_ENV = "PROTOPARSE_SEED"


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainingConfig:
    lam: float = 1.0
    smoothing_k: float = 3.0
    dropout_rate: float = 0.5
    shots: int = 1
    batch_size: int = 64
    meta_support_size: int = 30
    meta_test_per_support: int = 15
    lr: float = 0.0025
    decay_rate: float = 0.985
    decay_start: int = 20
    epochs: int = 80
    finetune_lr: float = 0.001
    finetune_epochs: int = 40
    finetune_batch_size: int = 2
    hidden: int = 256
    word_dim: int = 200
    max_steps: int = 100
    beam_width: int = 5
    clip_norm: float | None = 5.0
    use_meta: bool = True
    meta_omega: bool = True
    meta_slots: bool = True
    prototype_init: bool = True
    seed: int = 0
    alignment_file: str | None = None
    word_vectors: str | None = None
    annotations: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.smoothing_k < 0:
            raise ConfigError("smoothing_k must be >= 0")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1]")
        for name in ("shots", "batch_size", "meta_support_size", "meta_test_per_support",
                     "finetune_batch_size", "hidden", "word_dim", "max_steps", "beam_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("epochs", "finetune_epochs", "decay_start"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "TrainingConfig":
        """Read a JSON config.  Precedence: ``overrides`` (non-None values),
        then the file, then PROTOPARSE_SEED for the seed, then defaults."""
        obj = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        if not isinstance(obj, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.resolve(obj, **overrides)

    @classmethod
    def resolve(cls, obj: dict | None = None, **overrides) -> "TrainingConfig":
        merged = dict(obj or {})
        if "seed" not in merged and os.environ.get(SEED_ENV):
            try:
                merged["seed"] = int(os.environ[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(merged)

    def to_json(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig(word_dim=self.word_dim, hidden=self.hidden, max_steps=self.max_steps)


# ---------------------------------------------------------------------------
# prototypes and predicate dropout

def build_prototype(states: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of the decoder states collected for one action."""
    if not states:
        raise EmptySupportStates("a prototype needs at least one state")
    return ad.mean(list(states))


def combine_embeddings(C_s: Tensor, C_m: Tensor, mask: Sequence[int]) -> Tensor:
    """Row i of C_m where mask[i] is 1, else row i of C_s."""
    return ad.select_rows(C_s, C_m, mask)


# ---------------------------------------------------------------------------
# attention prior

def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def char_similarity(predicate: str, token: str) -> float:
    """1 - edit distance / longer length; 1 for two empty strings."""
    if not predicate and not token:
        return 1.0
    if not predicate or not token:
        return 0.0
    return 1.0 - edit_distance(predicate, token) / max(len(predicate), len(token))


class AlignmentPrior:
    """Per action and utterance, the two token measures blended by the gate:
    P(a | x_i) from example-level counts and character similarity between
    the action's longest predicate and x_i.  A manual annotation
    ``predicate -> tokens`` sets the similarity of listed tokens to 1."""

    def __init__(self, counts: CooccurrenceCounts, inventory: ActionInventory,
                 annotations: dict[str, Sequence[str]] | None = None):
        self.counts = counts
        self.inventory = inventory
        self.annotations = {p: set(ts) for p, ts in (annotations or {}).items()}
        self._cache: dict[tuple[int, tuple[str, ...]], tuple[np.ndarray, np.ndarray]] = {}

    def vectors(self, action_id: int, words: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        key = (action_id, tuple(words))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        akey = self.inventory.actions[action_id].key
        name = self.inventory.char_string(action_id)
        marked = set()
        for p in self.inventory.predicate_of[action_id]:
            marked |= self.annotations.get(p, set())
        cond = np.array([self.counts.prob(akey, w) for w in words])
        sim = np.array([1.0 if w in marked else char_similarity(name, w.lower()) for w in words])
        self._cache[key] = (cond, sim)
        return cond, sim


def regularized_prior(gate_w: Tensor, h_dec: Tensor, cond: np.ndarray, sim: np.ndarray) -> Tensor:
    """P' = normalize(gate * cond + (1 - gate) * sim), gate = sigmoid(w . h)."""
    gate = ad.sigmoid(ad.dot(gate_w, h_dec))
    s = ad.tensor(sim)
    g = ad.add(s, ad.mul_scalar(gate, ad.tensor(cond - sim)))
    return ad.normalize(g)


def attention_regularizer(model: ParserModel, trace: Trace, words: Sequence[str],
                          prior: AlignmentPrior) -> tuple[Tensor, int]:
    """Sum over regularized steps of |attention - P'|_1, and the step count.

    A step is regularized when its gold action produces a predicate and at
    least one token has a non-zero prior score."""
    terms = []
    for rec in trace.steps:
        if rec.gold == STOP or not model.inventory.predicate_of[rec.gold]:
            continue
        cond, sim = prior.vectors(rec.gold, words)
        if not (cond.any() or sim.any()):
            continue
        p_prior = regularized_prior(model["gate_w"], rec.h_dec, cond, sim)
        terms.append(ad.abs_sum(ad.sub(rec.attention, p_prior)))
    if not terms:
        return ad.tensor(0.0), 0
    return ad.add_n(terms), len(terms)


# ---------------------------------------------------------------------------
# training items and losses

@dataclass
class Item:
    example: Example
    instance: Instance
    alignment: dict[int, int] | None = None

    @property
    def words(self) -> list[str]:
        return self.instance.words


def example_loss(model: ParserModel, item: Item, C: Tensor | None, k: float, lam: float,
                 prior: AlignmentPrior | None, with_slots: bool = True) -> Tensor:
    """action NLL + slot NLL + lam * Omega for one example."""
    tr = model.forward(item.instance, C, k, with_slots=with_slots, alignment=item.alignment)
    parts = [tr.action_nll]
    if with_slots:
        parts.append(tr.slot_nll)
    if lam > 0 and prior is not None:
        omega, n = attention_regularizer(model, tr, item.words, prior)
        if n:
            parts.append(ad.scale(omega, lam))
    return ad.add_n(parts)


def supervised_loss(model: ParserModel, items: Sequence[Item], k: float, lam: float,
                    prior: AlignmentPrior | None) -> Tensor:
    """Mean over examples of ``L_s + lam * Omega``."""
    return ad.scale(ad.add_n([example_loss(model, it, None, k, lam, prior) for it in items]),
                    1.0 / len(items))


def dataset_loss(model: ParserModel, items: Sequence[Item]) -> float:
    """Mean unsmoothed ``L_s`` (actions and slots), no regularizer."""
    with ad.no_grad():
        return float(supervised_loss(model, items, 0.0, 0.0, None).value)


@dataclass
class MetaBatch:
    support: list[Item]
    test: list[Item]
    simulated_new: tuple[str, ...]
    mask: list[int]

    @property
    def masked_ids(self) -> list[int]:
        return [i for i, m in enumerate(self.mask) if m]


def _producers(items: Sequence[Item], inventory: ActionInventory, preds: set[str]) -> set[int]:
    return {a for it in items for a in it.instance.actions if inventory.predicate_of[a] & preds}


def sample_meta_batch(batch: Sequence[Item], rate: float, rng: np.random.Generator,
                      inventory: ActionInventory, support_size: int = 30,
                      test_per_support: int = 15, retries: int = 20) -> MetaBatch:
    """Split a batch into meta-support and meta-test halves and choose the
    predicates treated as new.

    ``ceil(rate * |P|)`` predicates are drawn from the batch's predicate set
    P.  The mask covers every action occurring in the batch that produces a
    drawn predicate.  The support half is redrawn up to ``retries`` times
    until it contains every masked action; after that, drawn predicates
    whose actions are not all covered are dropped."""
    if len(batch) < 2:
        raise BatchTooSmall(f"a meta batch needs at least 2 examples, got {len(batch)}")
    preds = sorted(set().union(*(it.example.predicates for it in batch)))
    n_new = min(len(preds), math.ceil(rate * len(preds)))
    chosen = sorted(preds[i] for i in rng.choice(len(preds), size=n_new, replace=False)) if n_new else []
    masked = _producers(batch, inventory, set(chosen))
    n_support = min(support_size, len(batch) - 1)
    for _ in range(retries):
        order = rng.permutation(len(batch))
        support = [batch[i] for i in order[:n_support]]
        covered = {a for it in support for a in it.instance.actions}
        if masked <= covered:
            break
    else:
        chosen = [p for p in chosen if _producers(batch, inventory, {p}) <= covered]
        masked = _producers(batch, inventory, set(chosen))
    rest = [batch[i] for i in order[n_support:]]
    test = rest[: test_per_support * n_support]
    mask = [1 if i in masked else 0 for i in range(len(inventory))]
    return MetaBatch(support, test, tuple(chosen), mask)


def meta_loss(model: ParserModel, mb: MetaBatch, k: float, lam: float = 0.0,
              prior: AlignmentPrior | None = None, with_slots: bool = True) -> Tensor:
    """Meta-test loss under prototype embeddings for the masked actions.

    The prototypes are means of fused states from a teacher-forced pass over
    the meta-support half, so gradients reach the shared parameters through
    them as well as through the meta-test pass."""
    C_s = model["act_emb"]
    masked = set(mb.masked_ids)
    if masked:
        collected: dict[int, list[Tensor]] = {a: [] for a in masked}
        for it in mb.support:
            tr = model.forward(it.instance, C_s, k, with_slots=False)
            for rec in tr.steps:
                if rec.gold in collected:
                    collected[rec.gold].append(rec.h_fused)
        missing = sorted(a for a, hs in collected.items() if not hs)
        if missing:
            raise MissingPrototype(f"actions {missing} never occur in the meta-support set")
        zero = ad.tensor(np.zeros(model.config.hidden))
        C_m = ad.stack([build_prototype(collected[i]) if i in masked else zero
                        for i in range(len(model.inventory))])
        C = combine_embeddings(C_s, C_m, mb.mask)
    else:
        C = C_s
    terms = [example_loss(model, it, C, k, lam, prior, with_slots) for it in mb.test]
    return ad.scale(ad.add_n(terms), 1.0 / len(terms))


def pretrain_objective(model: ParserModel, supervised: Sequence[Item], mb: MetaBatch,
                       cfg: TrainingConfig, prior: AlignmentPrior | None) -> Tensor:
    """``L_m + L_s + lam * Omega`` on one supervised batch and one meta batch."""
    l_s = supervised_loss(model, supervised, cfg.smoothing_k, cfg.lam, prior)
    l_m = meta_loss(model, mb, cfg.smoothing_k, cfg.lam if cfg.meta_omega else 0.0, prior, cfg.meta_slots)
    return ad.add(l_s, l_m)


# ---------------------------------------------------------------------------
# data plumbing

def load_alignments(path: str | Path) -> dict[int, dict[int, int]]:
    """Gold attention targets: JSON ``{example_id: {step: token_index}}``."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(e): {int(s): int(i) for s, i in steps.items()} for e, steps in obj.items()}


def slot_lexicons(examples: Sequence[Example]) -> dict[str, list[str]]:
    ents, vars_ = set(), set()
    for e in examples:
        ents.update(e.slots.entity_values)
        vars_.update(e.slots.variable_values)
    return {"entity": sorted(ents), "variable": sorted(vars_)}


def vocabulary(examples: Sequence[Example]) -> list[str]:
    return sorted({w for e in examples for w in e.words})


def make_items(model: ParserModel, examples: Sequence[Example],
               alignments: dict[int, dict[int, int]] | None = None) -> list[Item]:
    return [Item(e, model.prepare(e.words, e.oracle, e.slots), (alignments or {}).get(e.id))
            for e in examples]


def build_model(examples: Sequence[Example], cfg: TrainingConfig,
                idioms: IdiomInventory | None = None) -> ParserModel:
    idioms = idioms if idioms is not None else IdiomInventory([], 2)
    inventory = ActionInventory.build([e.norm_template for e in examples], expand=idioms.lookup)
    model = ParserModel(cfg.model_config(), inventory, vocabulary(examples), slot_lexicons(examples),
                        idioms, seed=cfg.seed)
    if cfg.word_vectors:
        model.load_word_vectors(cfg.word_vectors)
    return model


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


@dataclass
class TrainResult:
    model: ParserModel
    counts: CooccurrenceCounts
    history: list[float]
    added: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# pre-training

def pretrain(train: Sequence[Example], cfg: TrainingConfig, idioms: IdiomInventory | None = None,
             log: Callable[[int, float], None] | None = None) -> TrainResult:
    """Alternate supervised and meta batches for ``cfg.epochs`` epochs.

    ``history`` holds, per epoch, the mean loss of the supervised batches
    (the meta loss when an epoch has none)."""
    if not train:
        raise EmptyTrainSet("pre-training needs at least one example")
    model = build_model(train, cfg, idioms)
    alignments = load_alignments(cfg.alignment_file) if cfg.alignment_file else None
    items = make_items(model, train, alignments)
    counts = cooccurrence_counts(train)
    prior = AlignmentPrior(counts, model.inventory, cfg.annotations) if cfg.lam > 0 else None
    opt = ad.Adam(cfg.lr, decay_rate=cfg.decay_rate, decay_start=cfg.decay_start, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    counter = 0
    for epoch in range(1, cfg.epochs + 1):
        sup, meta = [], []
        for idx in _batches(len(items), cfg.batch_size, rng):
            batch = [items[i] for i in idx]
            loss = None
            if counter % 2 == 1 and cfg.use_meta:
                try:
                    mb = sample_meta_batch(batch, cfg.dropout_rate, rng, model.inventory,
                                           cfg.meta_support_size, cfg.meta_test_per_support)
                    loss = meta_loss(model, mb, cfg.smoothing_k, cfg.lam if cfg.meta_omega else 0.0,
                                     prior, cfg.meta_slots)
                    meta.append(float(loss.value))
                except BatchTooSmall:
                    loss = None
            if loss is None:
                loss = supervised_loss(model, batch, cfg.smoothing_k, cfg.lam, prior)
                sup.append(float(loss.value))
            model.store.zero_grad()
            ad.backward(loss)
            opt.step(model.store, epoch)
            counter += 1
        history.append(float(np.mean(sup if sup else meta)))
        if log:
            log(epoch, history[-1])
    return TrainResult(model, counts, history)


# ---------------------------------------------------------------------------
# fine-tuning

def init_new_actions(model: ParserModel, items: Sequence[Item], added: Sequence[int],
                     use_prototypes: bool = True) -> dict[int, np.ndarray]:
    """Set the embedding rows of ``added`` actions and return them.

    With prototypes each row becomes the mean fused state at the support
    steps where that action is gold, computed with the current embeddings
    (new rows are zero during this pass).  Otherwise rows are drawn
    uniformly from [-0.1, 0.1]."""
    added = list(added)
    if not added:
        return {}
    collected: dict[int, list[np.ndarray]] = {a: [] for a in added}
    with ad.no_grad():
        for it in items:
            tr = model.forward(it.instance, with_slots=False)
            for rec in tr.steps:
                if rec.gold in collected:
                    collected[rec.gold].append(rec.h_fused.value)
    missing = [a for a, hs in collected.items() if not hs]
    if missing:
        names = ", ".join(str(model.inventory.actions[a]) for a in missing)
        raise UncoveredNewAction(f"new actions never used by the support set: {names}")
    table = model.store["act_emb"].value.copy()
    for a in added:
        if use_prototypes:
            table[a] = np.mean(collected[a], axis=0)
        else:
            table[a] = model.store.rng.uniform(-0.1, 0.1, model.config.hidden)
    model.store.set("act_emb", table)
    return {a: table[a].copy() for a in added}


def extend_for(model: ParserModel, examples: Sequence[Example]) -> list[int]:
    """Grow the model's actions, vocabulary and slot lexicons to cover
    ``examples``; returns the ids of the added actions."""
    inventory = model.inventory.extended([e.norm_template for e in examples])
    lex = slot_lexicons(examples)
    merged = {t: list(model.lexicons[t]) + [v for v in lex[t] if v not in model.value_index[t]]
              for t in lex}
    return model.extend(inventory, vocabulary(examples), merged)


def finetune(model: ParserModel, support: Sequence[Example], cfg: TrainingConfig,
             train_counts: CooccurrenceCounts | None = None,
             log: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adapt a pre-trained model to the support set in place."""
    if not support:
        raise EmptyTrainSet("fine-tuning needs at least one support example")
    added = extend_for(model, support)
    items = make_items(model, support)
    init_new_actions(model, items, added, cfg.prototype_init)
    counts = (train_counts or CooccurrenceCounts()).merged(cooccurrence_counts(support))
    prior = AlignmentPrior(counts, model.inventory, cfg.annotations) if cfg.lam > 0 else None
    opt = ad.Adam(cfg.finetune_lr, decay_rate=1.0, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(1, cfg.finetune_epochs + 1):
        losses = []
        for idx in _batches(len(items), cfg.finetune_batch_size, rng):
            loss = supervised_loss(model, [items[i] for i in idx], 0.0, cfg.lam, prior)
            losses.append(float(loss.value))
            model.store.zero_grad()
            ad.backward(loss)
            opt.step(model.store, epoch)
        history.append(float(np.mean(losses)))
        if log:
            log(epoch, history[-1])
    return TrainResult(model, counts, history, added)


# ---------------------------------------------------------------------------
# checkpoints

PRIOR_FILE = "prior.json"


def save_checkpoint(model: ParserModel, counts: CooccurrenceCounts, directory: str | Path,
                    config: TrainingConfig | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    model.save(d)
    (d / PRIOR_FILE).write_text(json.dumps(counts.to_json(), sort_keys=True) + "\n", encoding="utf-8")
    if config is not None:
        (d / "training.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[ParserModel, CooccurrenceCounts]:
    d = Path(directory)
    if not (d / "model.json").is_file():
        raise FileNotFoundError(f"no checkpoint in {d}")
    model = ParserModel.load(d)
    p = d / PRIOR_FILE
    counts = CooccurrenceCounts.from_json(json.loads(p.read_text(encoding="utf-8"))) if p.is_file() \
        else CooccurrenceCounts()
    return model, counts
