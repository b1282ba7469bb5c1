"""Command-line entry point ``protoparse``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 invariant violation.  Errors are also written to stderr as one JSON
object ``{"error": <class name>, "message": ...}``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .data import (
    EvalReport,
    Example,
    apply_idioms,
    evaluate,
    load_dataset,
    make_fewshot_splits,
    normalize_examples,
    split_from_manifest,
    write_manifest,
)
from .errors import ConfigError, DataError, InvariantViolation, OracleRoundTripFailure, ProtoParseError
from .fewshot import (
    TrainingConfig,
    dataset_loss,
    finetune,
    load_checkpoint,
    make_items,
    pretrain,
    save_checkpoint,
)
from .idioms import IdiomInventory, expand_idioms, mean_action_count
from .lf import DEFAULT_LEXICON, AtomLexicon, serialize_lf
from .stats import wilcoxon_signed_rank
from .transition import execute, oracle_actions

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4


class UsageError(ProtoParseError):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _need_file(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _lexicon(args) -> AtomLexicon:
    p = _need_file(getattr(args, "lexicon", None), "lexicon")
    return AtomLexicon.from_file(p) if p else DEFAULT_LEXICON


def _dataset(args, idioms: IdiomInventory | None = None) -> list[Example]:
    examples = load_dataset(args.data, _lexicon(args))
    if idioms is not None and len(idioms):
        examples = apply_idioms(examples, idioms)
    return examples


def _idioms(path: str | None) -> IdiomInventory | None:
    p = _need_file(path, "idiom inventory")
    return IdiomInventory.load(p) if p else None


def _split(examples: Sequence[Example], path: str | None):
    p = _need_file(path, "split manifest")
    if p is None:
        return None
    return split_from_manifest(examples, json.loads(p.read_text(encoding="utf-8")))


def _config(args) -> TrainingConfig:
    p = _need_file(args.config, "config")
    obj = json.loads(p.read_text(encoding="utf-8")) if p else {}
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    flags = {k: getattr(args, k, None) for k in
             ("seed", "epochs", "hidden", "word_dim", "lr", "lam", "smoothing_k", "batch_size",
              "finetune_epochs", "finetune_lr", "beam_width")}
    if getattr(args, "no_proto", False):
        flags["prototype_init"] = False
    if getattr(args, "no_meta", False):
        flags["use_meta"] = False
    return TrainingConfig.resolve(obj, **flags)


# ---------------------------------------------------------------------------
# commands

def cmd_normalize(args) -> int:
    examples = load_dataset(args.data, _lexicon(args))
    before = [e.template.tree for e in examples]
    normalized, inventory = normalize_examples(examples, args.min_support, args.max_size, args.ratio)
    after = [e.norm_template for e in normalized]
    if expand_idioms(after, inventory) != before:
        raise InvariantViolation("expanding the normalized templates does not restore the corpus")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inventory.save(out / "idioms.json")
    lines = [f"{e.id}\t{serialize_lf(e.template.tree)}\t{serialize_lf(e.norm_template)}\n" for e in normalized]
    (out / "templates.tsv").write_text("".join(lines), encoding="utf-8")
    if not len(inventory):
        print(f"warning: no idiom reaches min_support={args.min_support}", file=sys.stderr)
    _emit({"idioms": len(inventory), "mean_actions_before": mean_action_count(before),
           "mean_actions_after": mean_action_count(after), "examples": len(examples)})
    return EXIT_OK


def cmd_split(args) -> int:
    examples = _dataset(args, _idioms(args.idioms))
    new = [p for p in args.new_predicates.split(",") if p] if args.new_predicates else None
    splits = make_fewshot_splits(examples, args.m_new, args.K, args.n_splits, args.seed, new, args.max_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in splits:
        write_manifest(s, out / f"split_{s.index}.json")
    _emit({"splits": len(splits), "new_predicates": list(splits[0].new_predicates),
           "train": len(splits[0].train), "support": [len(s.support) for s in splits],
           "test": [len(s.test) for s in splits]})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    idioms = _idioms(args.idioms)
    examples = _dataset(args, idioms)
    split = _split(examples, args.split)
    train = split.train if split else examples
    result = pretrain(train, cfg, idioms)
    save_checkpoint(result.model, result.counts, args.out, cfg)
    loss = dataset_loss(result.model, make_items(result.model, train))
    _emit({"examples": len(train), "epochs": cfg.epochs, "final_epoch_loss": result.history[-1] if result.history else None,
           "train_loss": loss, "actions": len(result.model.inventory)})
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    model, counts = load_checkpoint(args.checkpoint)
    examples = _dataset(args, model.idioms)
    split = _split(examples, args.split)
    if split is None:
        raise UsageError("finetune needs --split to locate the support set")
    result = finetune(model, split.support, cfg, counts)
    save_checkpoint(model, result.counts, args.out, cfg)
    loss = dataset_loss(model, make_items(model, split.support))
    _emit({"support": len(split.support), "new_actions": len(result.added), "support_loss": loss})
    return EXIT_OK


def _parser_fn(model, beam: int):
    if beam > 1:
        return lambda words: model.parse(words, "beam", beam).lf
    return lambda words: model.parse(words).lf


def cmd_parse(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    texts = list(args.utterance)
    if args.input:
        texts += [t for t in _need_file(args.input, "input").read_text(encoding="utf-8").splitlines() if t.strip()]
    if not texts:
        raise UsageError("give utterances as arguments or with --input")
    parse = _parser_fn(model, args.beam)
    for t in texts:
        try:
            print(serialize_lf(parse(t.split())))
        except ProtoParseError as exc:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True))
    return EXIT_OK


def _load_report(path: str) -> EvalReport:
    p = _need_file(path, "report")
    return EvalReport.from_json(json.loads(p.read_text(encoding="utf-8")))


def cmd_eval(args) -> int:
    if args.compare_a or args.compare_b:
        a = [_load_report(p).exact_match_accuracy for p in args.compare_a]
        b = [_load_report(p).exact_match_accuracy for p in args.compare_b]
        if len(a) != len(b):
            raise UsageError("--compare-a and --compare-b need the same number of reports")
        _emit({"a": a, "b": b, "p_value": wilcoxon_signed_rank(a, b)})
        return EXIT_OK
    if not (args.checkpoint and args.data):
        raise UsageError("eval needs --checkpoint and --data, or --compare-a/--compare-b")
    model, _ = load_checkpoint(args.checkpoint)
    examples = _dataset(args, model.idioms)
    split = _split(examples, args.split)
    if split is None:
        targets, new = examples, ()
    else:
        targets, new = (split.support if args.on == "support" else split.test), split.new_predicates
    report = evaluate(_parser_fn(model, args.beam), targets, new)
    if args.out:
        Path(args.out).write_text(report.dumps(), encoding="utf-8")
    _emit({"exact_match_accuracy": report.exact_match_accuracy, "per_predicate": report.per_predicate,
           "examples": len(targets)})
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    idioms = _idioms(args.idioms)
    examples = _dataset(args, idioms)
    for e in examples:
        if execute(oracle_actions(e.norm_template)) != e.norm_template:
            raise OracleRoundTripFailure(e.id, "oracle does not rebuild the template")
    _emit({"examples": len(examples), "failures": 0})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TrainingConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--word-dim", dest="word_dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float, help="attention regularizer weight")
    p.add_argument("--smoothing-k", dest="smoothing_k", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--finetune-lr", dest="finetune_lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="protoparse", description="Few-shot transition-based semantic parser.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="mine idioms and write normalized templates")
    p.add_argument("--data", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--min-support", dest="min_support", type=int, default=2)
    p.add_argument("--max-size", dest="max_size", type=int, default=8)
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("split", help="write few-shot split manifests")
    p.add_argument("--data", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--idioms")
    p.add_argument("--m-new", dest="m_new", type=int, required=True)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--n-splits", dest="n_splits", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--new-predicates", dest="new_predicates")
    p.add_argument("--max-fraction", dest="max_fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="pre-train on the training part of a split")
    p.add_argument("--data", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--idioms")
    p.add_argument("--split")
    p.add_argument("--no-meta", dest="no_meta", action="store_true")
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on a split's support set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--split", required=True)
    p.add_argument("--no-proto", dest="no_proto", action="store_true",
                   help="random instead of prototype initialization of new actions")
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("parse", help="parse utterances with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("utterance", nargs="*")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("eval", help="exact-match evaluation or a Wilcoxon comparison of reports")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--lexicon")
    p.add_argument("--split")
    p.add_argument("--on", choices=("test", "support"), default="test")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--compare-a", dest="compare_a", nargs="*", default=[])
    p.add_argument("--compare-b", dest="compare_b", nargs="*", default=[])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-check", help="verify execute(oracle(t)) == t over a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--idioms")
    p.set_defaults(func=cmd_oracle_check)
    return ap


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, InvariantViolation):
        return EXIT_INVARIANT
    return EXIT_DATA


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ProtoParseError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": msg}, sort_keys=True), file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
