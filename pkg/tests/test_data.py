import json

import numpy as np
import pytest

from protoparse.data import (
    EvalReport,
    cooccurrence_counts,
    cooccurrence_table,
    evaluate,
    exact_match,
    load_dataset,
    make_fewshot_splits,
    normalize_examples,
    parse_dataset,
    remove_unique_templates,
    split_from_manifest,
    write_manifest,
)
from protoparse.errors import (
    DataError,
    InsufficientExamplesForPredicate,
    MalformedLine,
    StepLimitExceeded,
)
from protoparse.lf import fill_template, parse_lf
from protoparse.synthetic import grammar_tsv
from protoparse.transition import execute

TOY = ("what rivers are in texas\t(lambda $0 e (and (river $0) (loc $0 texas:s)))\n"
       "how long is the ohio\t(len ohio:r)\n")


@pytest.fixture(scope="module")
def grammar():
    return parse_dataset(grammar_tsv(0))


class TestLoad:
    def test_two_line_file(self, tmp_path):
        p = tmp_path / "toy.tsv"
        p.write_text(TOY, encoding="utf-8")
        exs = load_dataset(p)
        assert [e.id for e in exs] == [1, 2]
        for e in exs:
            assert fill_template(e.template, e.slots) == e.lf
            assert execute(e.oracle) == e.template.tree
        assert exs[0].predicates == {"lambda", "and", "river", "loc"}

    def test_missing_tab(self):
        with pytest.raises(MalformedLine) as info:
            parse_dataset("ok\t(a $0)\nno tab here (b $0)\n")
        assert info.value.line_no == 2

    def test_bad_lf_reports_line(self):
        with pytest.raises(MalformedLine) as info:
            parse_dataset("x\t(a $0\n")
        assert info.value.line_no == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "absent.tsv")


class TestSplits:
    def test_k1_five_new(self, grammar):
        for s in make_fewshot_splits(grammar, 5, 1, 3, seed=4):
            assert len(s.new_predicates) == 5
            assert len(s.support) <= 5
            for p in s.new_predicates:
                assert any(p in e.predicates for e in s.support)

    @pytest.mark.parametrize("seed", range(4))
    def test_soundness(self, grammar, seed):
        splits = make_fewshot_splits(grammar, 3, 2, 6, seed)
        assert [s.index for s in splits] == list(range(6))
        assert splits[0].tuning and not splits[1].tuning
        for s in splits:
            new = set(s.new_predicates)
            assert all(not (e.predicates & new) for e in s.train)
            assert all(e.predicates & new for e in s.test)
            assert not {e.id for e in s.support} & {e.id for e in s.test}
            for p in new:
                assert sum(p in e.predicates for e in s.support) >= 2

    def test_seed_replay_identical_manifests(self, grammar, tmp_path):
        a = make_fewshot_splits(grammar, 3, 1, 2, seed=9)
        b = make_fewshot_splits(grammar, 3, 1, 2, seed=9)
        for i, (x, y) in enumerate(zip(a, b)):
            write_manifest(x, tmp_path / f"a{i}.json")
            write_manifest(y, tmp_path / f"b{i}.json")
            assert (tmp_path / f"a{i}.json").read_bytes() == (tmp_path / f"b{i}.json").read_bytes()

    def test_manifest_round_trip(self, grammar):
        s = make_fewshot_splits(grammar, 3, 1, 1, seed=2)[0]
        back = split_from_manifest(grammar, json.loads(json.dumps(s.manifest())))
        assert back.manifest() == s.manifest()

    def test_insufficient(self, grammar):
        with pytest.raises(InsufficientExamplesForPredicate):
            make_fewshot_splits(grammar, 3, 500, 1, seed=0)
        with pytest.raises(InsufficientExamplesForPredicate) as info:
            make_fewshot_splits(grammar, 1, 500, 1, seed=0, new_predicates=["meal"])
        assert info.value.symbol == "meal"

    def test_unique_templates_removed(self):
        exs = parse_dataset("a\t(p $0)\nb\t(p $1)\nc\t(q $0)\n")
        assert [e.id for e in remove_unique_templates(exs)] == [1, 2]

    def test_unsound_manifest_rejected(self, grammar):
        s = make_fewshot_splits(grammar, 3, 1, 1, seed=2)[0]
        s.train.append(s.test[0])
        with pytest.raises(DataError):
            s.check()


class TestCooccurrence:
    def test_hand_count(self):
        exs = parse_dataset(
            "river one\t(river $0)\n"
            "river two\t(len $0)\n"
            "the river\t(river $0)\n"
            "a river\t(len $0)\n"
            "nothing\t(river $0)\n")
        table = cooccurrence_table(exs)
        gen_river = exs[0].oracle[0].key
        assert table[(gen_river, "river")] == 0.5
        assert table[(gen_river, "nothing")] == 1.0
        assert cooccurrence_counts(exs).prob(gen_river, "absent") == 0.0
        assert ("absent" not in {x for _, x in table})

    def test_bounded(self, grammar):
        assert all(0.0 <= v <= 1.0 for v in cooccurrence_table(grammar).values())

    def test_empty(self):
        with pytest.raises(DataError):
            cooccurrence_table([])

    def test_counts_json_round_trip(self, grammar):
        c = cooccurrence_counts(grammar[:20])
        back = type(c).from_json(json.loads(json.dumps(c.to_json())))
        assert back.table() == c.table()


class TestExactMatch:
    def test_cases(self):
        assert exact_match("(a $0 b:c)", "( a  $0 b:c )")
        assert not exact_match("(a $0 b:c)", "(a $0 d:c)")
        assert exact_match(parse_lf("(a\n$0)"), "(a $0)")

    def test_evaluate_counts_failures_as_wrong(self, grammar):
        gold = {tuple(e.words): e.lf for e in grammar[:6]}

        def parse(words):
            if words == list(grammar[0].words):
                raise StepLimitExceeded("boom")
            return gold[tuple(words)]

        rep = evaluate(parse, grammar[:6], ["flight"])
        dup = sum(tuple(e.words) == tuple(grammar[0].words) for e in grammar[:6])
        assert rep.counts["correct"] == 6 - dup
        assert rep.exact_match_accuracy == pytest.approx((6 - dup) / 6)
        assert rep.per_predicate["flight"] == rep.exact_match_accuracy
        back = EvalReport.from_json(json.loads(rep.dumps()))
        assert back.dumps() == rep.dumps()


def test_normalize_examples_keeps_oracles_consistent(grammar):
    exs, inv = normalize_examples(grammar[:40], 3)
    for e in exs:
        assert execute(e.oracle) == e.norm_template
    assert np.mean([len(e.oracle) for e in exs]) <= np.mean([len(e.oracle) for e in grammar[:40]])
