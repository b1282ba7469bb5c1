"""Neural transition parser: BiLSTM encoder, stack-LSTM decoder over
GEN/REDUCE actions, and one slot-value decoder per slot type.

Decoder bookkeeping.  ``pstack`` holds one LSTM state per tree on the parser
stack plus the initial state at the bottom.  The hidden state used to
predict the next action is the top of ``pstack``.  After an action ``a``:

* GEN pushes ``LSTM([c_a; h_top], top)``;
* REDUCE with k children pops k states, forms the subtree representation
  ``M [c_a; mean(popped h)]`` and pushes ``LSTM([c_a; rep], new top)``.

So a REDUCE resumes from the state under its children, which is the branch
point of the stack-LSTM.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    EmptyApplicableSet,
    EmptyPop,
    GoldActionInapplicable,
    MissingNodeState,
    StepLimitExceeded,
)
from .idioms import IdiomInventory
from .lf import SlotAssignment, Template, Tree, expand_tree, fill_template
from .transition import (
    Action,
    ActionInventory,
    ParserState,
    apply_action,
    applicable_actions,
    execute,
    slot_layout,
)

STOP = -1
UNK = "<unk>"
SLOT_TYPES = ("entity", "variable")


@dataclass
class ModelConfig:
    word_dim: int = 200
    hidden: int = 256
    max_steps: int = 100


@dataclass
class Instance:
    """An example prepared for the model: ids instead of strings."""

    words: list[str]
    word_ids: list[int]
    actions: list[int]
    slot_targets: dict[tuple[int, str], list[int]] = field(default_factory=dict)


@dataclass
class EncoderOutput:
    reps: list[Tensor]
    matrix: Tensor
    keys: Tensor

    def __len__(self) -> int:
        return len(self.reps)


@dataclass
class StepRecord:
    gold: int
    h_dec: Tensor
    h_fused: Tensor
    attention: Tensor


@dataclass
class Trace:
    steps: list[StepRecord]
    action_nll: Tensor
    slot_nll: Tensor
    encoder: EncoderOutput


@dataclass
class ParseResult:
    actions: list[Action]
    template: Tree
    expanded: Tree
    lf: Tree
    logprob: float


@dataclass
class _Hyp:
    logprob: float
    pstack: tuple
    state: ParserState
    ids: tuple[int, ...]
    fused: tuple[Tensor, ...]
    finished: bool = False
    pending: bool = False


def partial_tree_rep(M: Tensor, head: Tensor, popped: Sequence[Tensor]) -> Tensor:
    """M [head; mean(popped)] for a REDUCE."""
    if not popped:
        raise EmptyPop("REDUCE popped no decoder states")
    return ad.matmul(M, ad.concat([head, ad.mean(list(popped))]))


def attend(h: Tensor, enc: EncoderOutput) -> tuple[Tensor, Tensor]:
    """Dot-product attention of ``h`` over the projected encoder states."""
    p = ad.softmax(ad.matmul(enc.keys, h))
    return p, ad.matmul(p, enc.matrix)


class ParserModel:
    def __init__(self, config: ModelConfig, inventory: ActionInventory, vocab: Sequence[str],
                 lexicons: dict[str, Sequence[str]], idioms: IdiomInventory | None = None,
                 seed: int = 0, store: ad.ParameterStore | None = None):
        self.config = config
        self.idioms = idioms if idioms is not None else IdiomInventory([], 2)
        inventory.expand = self.idioms.lookup
        self.inventory = inventory
        self.vocab = [UNK] + [w for w in vocab if w != UNK]
        self.word_index = {w: i for i, w in enumerate(self.vocab)}
        self.lexicons = {t: list(lexicons.get(t, [])) for t in SLOT_TYPES}
        self.value_index = {t: {v: i for i, v in enumerate(vs)} for t, vs in self.lexicons.items()}
        if store is None:
            store = ad.ParameterStore(seed)
            self._init_params(store)
        self.store = store

    # -- parameters -----------------------------------------------------------

    def _init_params(self, s: ad.ParameterStore) -> None:
        E, H = self.config.word_dim, self.config.hidden
        s.embedding("word_emb", (len(self.vocab), E))
        for d in ("fw", "bw"):
            s.glorot(f"enc_{d}_W", (4 * H, E + H))
            s.zeros(f"enc_{d}_b", (4 * H,))
        s.glorot("init_W", (H, 2 * H))
        s.zeros("init_b", (H,))
        s.glorot("att_K", (H, 2 * H))
        s.glorot("dec_W", (4 * H, 2 * H + H))
        s.zeros("dec_b", (4 * H,))
        s.glorot("fuse_W", (H, 3 * H))
        s.glorot("tree_M", (H, 2 * H))
        s.embedding("act_emb", (len(self.inventory), H))
        s.embedding("stop_emb", (1, H))
        s.glorot("gate_w", (H,))
        for t in SLOT_TYPES:
            n = len(self.lexicons[t])
            s.embedding(f"slot_{t}_in", (n + 1, H))
            s.glorot(f"slot_{t}_W", (4 * H, 2 * H))
            s.zeros(f"slot_{t}_b", (4 * H,))
            s.glorot(f"slot_{t}_K", (H, 2 * H))
            s.glorot(f"slot_{t}_fuse", (H, 3 * H))
            s.embedding(f"slot_{t}_out", (n, H))

    def __getitem__(self, name: str) -> Tensor:
        return self.store[name]

    def extend(self, inventory: ActionInventory, vocab: Sequence[str], lexicons: dict[str, Sequence[str]]) -> list[int]:
        """Grow to a larger action inventory, vocabulary and slot lexicons.

        New action rows start at zero; new word and value rows are drawn
        like the originals.  Returns the ids of the added actions."""
        old_actions = len(self.inventory)
        if inventory.actions[:old_actions] != self.inventory.actions:
            raise ValueError("new inventory must extend the current one")
        inventory.expand = self.idioms.lookup
        H = self.config.hidden
        added = list(range(old_actions, len(inventory)))
        if added:
            self.store.append_rows("act_emb", np.zeros((len(added), H)))
        self.inventory = inventory
        new_words = [w for w in vocab if w not in self.word_index]
        if new_words:
            self.store.append_rows("word_emb", self.store.rng.uniform(-0.1, 0.1, (len(new_words), self.config.word_dim)))
            for w in new_words:
                self.word_index[w] = len(self.vocab)
                self.vocab.append(w)
        for t in SLOT_TYPES:
            fresh = [v for v in lexicons.get(t, []) if v not in self.value_index[t]]
            if not fresh:
                continue
            n_old = len(self.lexicons[t])
            start_row = self.store[f"slot_{t}_in"].value[n_old:].copy()
            grown_in = np.vstack([self.store[f"slot_{t}_in"].value[:n_old],
                                  self.store.rng.uniform(-0.1, 0.1, (len(fresh), H)), start_row])
            self.store.set(f"slot_{t}_in", grown_in)
            self.store.append_rows(f"slot_{t}_out", self.store.rng.uniform(-0.1, 0.1, (len(fresh), H)))
            for v in fresh:
                self.value_index[t][v] = len(self.lexicons[t])
                self.lexicons[t].append(v)
        return added

    def load_word_vectors(self, path: str | Path) -> int:
        """Overwrite rows of known words from a whitespace text file of
        ``token v1 ... vd`` lines; returns the number of rows replaced."""
        table = self.store["word_emb"].value
        hit = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            parts = line.split()
            if len(parts) != self.config.word_dim + 1 or parts[0] not in self.word_index:
                continue
            table[self.word_index[parts[0]]] = np.array(parts[1:], dtype=np.float64)
            hit += 1
        return hit

    # -- preparation ----------------------------------------------------------

    def word_ids(self, words: Sequence[str]) -> list[int]:
        return [self.word_index.get(w, 0) for w in words]

    def prepare(self, words: Sequence[str], actions: Sequence[Action], slots: SlotAssignment) -> Instance:
        ids = []
        for a in actions:
            if a not in self.inventory:
                raise GoldActionInapplicable(f"gold action {a} is not in the inventory")
            ids.append(self.inventory.id_of(a))
        targets: dict[tuple[int, str], list[int]] = {}
        values = {"entity": iter(slots.entity_values), "variable": iter(slots.variable_values)}
        for step, typ in slot_layout(actions, self.inventory.expand):
            v = next(values[typ])
            if v not in self.value_index[typ]:
                raise KeyError(f"{typ} value {v!r} missing from the slot lexicon")
            targets.setdefault((step, typ), []).append(self.value_index[typ][v])
        return Instance(list(words), self.word_ids(words), ids, targets)

    # -- encoder / decoder pieces --------------------------------------------

    def encode(self, word_ids: Sequence[int]) -> EncoderOutput:
        if not word_ids:
            raise ValueError("cannot encode an empty utterance")
        s, H = self.store, self.config.hidden
        xs = [ad.row(s["word_emb"], i) for i in word_ids]
        zero = ad.tensor(np.zeros(H))
        fw, bw = [], []
        h, c = zero, zero
        for x in xs:
            h, c = ad.lstm_cell(x, h, c, s["enc_fw_W"], s["enc_fw_b"])
            fw.append(h)
        h, c = zero, zero
        for x in reversed(xs):
            h, c = ad.lstm_cell(x, h, c, s["enc_bw_W"], s["enc_bw_b"])
            bw.append(h)
        bw.reverse()
        reps = [ad.concat([f, b]) for f, b in zip(fw, bw)]
        matrix = ad.stack(reps)
        keys = ad.matmul(matrix, ad.transpose(s["att_K"]))
        return EncoderOutput(reps, matrix, keys)

    def initial_state(self, enc: EncoderOutput) -> tuple[Tensor, Tensor]:
        s, H = self.store, self.config.hidden
        summary = ad.concat([ad.slice_(enc.reps[-1], 0, H), ad.slice_(enc.reps[0], H, 2 * H)])
        h0 = ad.tanh(ad.add(ad.matmul(s["init_W"], summary), s["init_b"]))
        return h0, ad.tensor(np.zeros(H))

    def fuse(self, h_dec: Tensor, enc: EncoderOutput) -> tuple[Tensor, Tensor]:
        """(attention distribution, h_t = W [h_dec; attended])."""
        p, h_att = attend(h_dec, enc)
        return p, ad.matmul(self.store["fuse_W"], ad.concat([h_dec, h_att]))

    def candidates(self, state: ParserState) -> list[int]:
        """Applicable action ids in ascending order, then STOP if allowed."""
        ids = sorted(applicable_actions(state, self.inventory))
        if state.can_finish:
            ids.append(STOP)
        if not ids:
            raise EmptyApplicableSet("no applicable action")
        return ids

    def logits(self, h: Tensor, C: Tensor, cand: Sequence[int]) -> Tensor:
        known = [i for i in cand if i != STOP]
        parts = []
        if known:
            parts.append(ad.rows(C, known))
        if len(known) != len(cand):
            parts.append(self.store["stop_emb"])
        return ad.matmul(ad.concat(parts) if len(parts) > 1 else parts[0], h)

    def advance(self, pstack: tuple, state: ParserState, action_id: int, C: Tensor) -> tuple[tuple, ParserState]:
        a = self.inventory.actions[action_id]
        c_a = ad.row(C, action_id)
        if a.is_gen:
            base, h_y = pstack, pstack[-1][0]
        else:
            k = a.payload.arity
            if len(pstack) - 1 < k:
                raise EmptyPop(f"REDUCE needs {k} states, stack has {len(pstack) - 1}")
            h_y = partial_tree_rep(self.store["tree_M"], c_a, [st[0] for st in pstack[len(pstack) - k:]])
            base = pstack[: len(pstack) - k]
        top_h, top_c = base[-1]
        h, c = ad.lstm_cell(ad.concat([c_a, h_y]), top_h, top_c, self.store["dec_W"], self.store["dec_b"])
        return base + ((h, c),), apply_action(state, a)

    # -- training forward ---------------------------------------------------

    def forward(self, inst: Instance, C: Tensor | None = None, k: float = 0.0,
                with_slots: bool = True, alignment: dict[int, int] | None = None) -> Trace:
        """Teacher-forced pass over the gold actions followed by STOP.

        ``alignment`` optionally maps a step to the gold token index and adds
        the attention cross-entropy for those steps to the action loss."""
        C = self.store["act_emb"] if C is None else C
        enc = self.encode(inst.word_ids)
        pstack = (self.initial_state(enc),)
        state = ParserState()
        terms, records = [], []
        for t, gold in enumerate(list(inst.actions) + [STOP]):
            h_dec = pstack[-1][0]
            p, h = self.fuse(h_dec, enc)
            cand = self.candidates(state)
            if gold not in cand:
                what = "STOP" if gold == STOP else str(self.inventory.actions[gold])
                raise GoldActionInapplicable(f"gold action {what} is not applicable at step {t}")
            lp = ad.log_softmax(self.logits(h, C, cand), k)
            terms.append(ad.pick(lp, cand.index(gold)))
            if alignment and t in alignment:
                terms.append(ad.log(ad.pick(p, alignment[t])))
            records.append(StepRecord(gold, h_dec, h, p))
            if gold != STOP:
                pstack, state = self.advance(pstack, state, gold, C)
        action_nll = ad.scale(ad.add_n(terms), -1.0)
        slot_terms = []
        if with_slots:
            for (step, typ), targets in sorted(inst.slot_targets.items()):
                slot_terms.append(self._slot_nll(typ, records[step].h_fused, enc, targets))
        slot_nll = ad.add_n(slot_terms) if slot_terms else ad.tensor(0.0)
        return Trace(records, action_nll, slot_nll, enc)

    def _slot_steps(self, typ: str, h0: Tensor, enc: EncoderOutput, feed: Sequence[int] | None, T: int):
        """Yield value log-probabilities for T steps; ``feed`` gives the
        previous gold values (teacher forcing) or None for greedy."""
        s, H = self.store, self.config.hidden
        n = len(self.lexicons[typ])
        x = ad.row(s[f"slot_{typ}_in"], n)
        h, c = h0, ad.tensor(np.zeros(H))
        K = ad.matmul(enc.matrix, ad.transpose(s[f"slot_{typ}_K"]))
        for j in range(T):
            h, c = ad.lstm_cell(x, h, c, s[f"slot_{typ}_W"], s[f"slot_{typ}_b"])
            p = ad.softmax(ad.matmul(K, h))
            o = ad.matmul(s[f"slot_{typ}_fuse"], ad.concat([h, ad.matmul(p, enc.matrix)]))
            lp = ad.log_softmax(ad.matmul(s[f"slot_{typ}_out"], o))
            choice = feed[j] if feed is not None else int(np.argmax(lp.value))
            yield lp, choice
            x = ad.row(s[f"slot_{typ}_in"], choice)

    def _slot_nll(self, typ: str, h0: Tensor, enc: EncoderOutput, targets: Sequence[int]) -> Tensor:
        terms = [ad.pick(lp, v) for lp, v in self._slot_steps(typ, h0, enc, targets, len(targets))]
        return ad.scale(ad.add_n(terms), -1.0)

    def fill_slots(self, actions: Sequence[Action], node_states: dict[int, Tensor], enc: EncoderOutput) -> SlotAssignment:
        """Greedy slot values for the tree built by ``actions``; node_states
        maps a step to the fused state that produced it."""
        layout = slot_layout(actions, self.inventory.expand)
        need: dict[tuple[int, str], int] = {}
        for step, typ in layout:
            need[(step, typ)] = need.get((step, typ), 0) + 1
        produced: dict[tuple[int, str], list[str]] = {}
        for (step, typ), T in need.items():
            if step not in node_states:
                raise MissingNodeState(f"no decoder state for step {step}")
            if not self.lexicons[typ]:
                produced[(step, typ)] = [UNK] * T
                continue
            produced[(step, typ)] = [self.lexicons[typ][v] for _, v in
                                     self._slot_steps(typ, node_states[step], enc, None, T)]
        cursor = {key: iter(vals) for key, vals in produced.items()}
        ents, vars_ = [], []
        for step, typ in layout:
            (ents if typ == "entity" else vars_).append(next(cursor[(step, typ)]))
        return SlotAssignment(tuple(ents), tuple(vars_))

    # -- inference ------------------------------------------------------------

    def _expand_hyp(self, hyp: _Hyp, enc: EncoderOutput, C: Tensor) -> list[_Hyp]:
        """All one-action extensions; non-STOP ones are applied lazily."""
        _, h = self.fuse(hyp.pstack[-1][0], enc)
        cand = self.candidates(hyp.state)
        lp = ad.log_softmax(self.logits(h, C, cand)).value
        out = []
        for j, a in enumerate(cand):
            if a == STOP:
                out.append(_Hyp(hyp.logprob + lp[j], hyp.pstack, hyp.state.finish(), hyp.ids,
                                hyp.fused + (h,), finished=True))
            else:
                out.append(_Hyp(hyp.logprob + lp[j], hyp.pstack, hyp.state, hyp.ids + (a,),
                                hyp.fused + (h,), pending=True))
        return out

    def _settle(self, hyp: _Hyp, C: Tensor) -> None:
        if hyp.pending:
            hyp.pstack, hyp.state = self.advance(hyp.pstack, hyp.state, hyp.ids[-1], C)
            hyp.pending = False

    def decode_template(self, words: Sequence[str], mode: str = "greedy", width: int = 1):
        """Best action sequence, its log-probability, the fused state of each
        step and the encoder output.  Beam search also scores the greedy
        sequence and returns whichever is more probable."""
        if mode not in ("greedy", "beam"):
            raise ValueError(f"unknown decode mode {mode!r}")
        with ad.no_grad():
            C = self.store["act_emb"]
            enc = self.encode(self.word_ids(words))
            start = _Hyp(0.0, (self.initial_state(enc),), ParserState(), (), ())
            best = self._beam(start, enc, C, 1)
            if mode == "beam" and width > 1:
                wide = self._beam(start, enc, C, width)
                if wide.logprob > best.logprob:
                    best = wide
        return [self.inventory.actions[i] for i in best.ids], best.logprob, best.fused, enc

    def _beam(self, start: _Hyp, enc: EncoderOutput, C: Tensor, width: int) -> _Hyp:
        # width 1 is greedy decoding: the stable sort keeps the first maximum
        beam = [start]
        for _ in range(self.config.max_steps + 1):
            pool = []
            for hyp in beam:
                pool.extend([hyp] if hyp.finished else self._expand_hyp(hyp, enc, C))
            pool.sort(key=lambda o: -o.logprob)
            beam = pool[:width]
            if all(h.finished for h in beam):
                return beam[0]
            for hyp in beam:
                self._settle(hyp, C)
        raise StepLimitExceeded(f"no complete tree within {self.config.max_steps} steps")

    def parse(self, words: Sequence[str], mode: str = "greedy", width: int = 1) -> ParseResult:
        actions, logprob, fused, enc = self.decode_template(words, mode, width)
        template = execute(actions)
        expanded = expand_tree(template, self.idioms.lookup)
        with ad.no_grad():
            slots = self.fill_slots(actions, dict(enumerate(fused)), enc)
        lf = fill_template(Template(expanded), slots)
        return ParseResult(actions, template, expanded, lf, float(logprob))

    # -- persistence ----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        self.store.save(d, asdict(self.config))
        side = {
            "actions": self.inventory.to_json(),
            "lexicons": self.lexicons,
            "vocab": self.vocab,
            "idioms": self.idioms.to_json(),
        }
        (d / "model.json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "ParserModel":
        d = Path(directory)
        store, hyper = ad.ParameterStore.load(d)
        side = json.loads((d / "model.json").read_text(encoding="utf-8"))
        idioms = IdiomInventory.from_json(side["idioms"])
        inventory = ActionInventory.from_json(side["actions"], expand=idioms.lookup)
        return cls(ModelConfig(**hyper), inventory, side["vocab"], side["lexicons"], idioms, store.seed, store)

