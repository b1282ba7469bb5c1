import json
from pathlib import Path

import pytest

from protoparse import cli
from protoparse.idioms import IdiomInventory

TOY = Path(__file__).parent / "data" / "toy.tsv"
TRAIN_FLAGS = ["--hidden", "16", "--word-dim", "16", "--epochs", "80", "--lr", "0.02", "--batch-size", "2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """split -> pretrain -> finetune on the toy corpus, shared by tests."""
    d = tmp_path_factory.mktemp("pipe")
    assert cli.main(["split", "--data", str(TOY), "--m-new", "1", "--K", "1", "--n-splits", "2",
                     "--new-predicates", "meal", "--out", str(d / "splits")]) == 0
    split = d / "splits" / "split_1.json"
    assert cli.main(["pretrain", "--data", str(TOY), "--split", str(split), *TRAIN_FLAGS,
                     "--out", str(d / "pre")]) == 0
    assert cli.main(["finetune", "--checkpoint", str(d / "pre"), "--data", str(TOY), "--split", str(split),
                     "--finetune-epochs", "40", "--finetune-lr", "0.01", "--out", str(d / "ft")]) == 0
    return d, split


class TestNormalize:
    def test_writes_inventory(self, tmp_path, capsys):
        code, out, _ = run(capsys, "normalize", "--data", TOY, "--min-support", 2, "--out", tmp_path)
        assert code == 0
        info = last_json(out)
        assert info["mean_actions_after"] < info["mean_actions_before"]
        inv = IdiomInventory.load(tmp_path / "idioms.json")
        assert len(inv) == info["idioms"] > 0
        assert len((tmp_path / "templates.tsv").read_text().splitlines()) == 13

    def test_threshold_above_corpus(self, tmp_path, capsys):
        code, out, err = run(capsys, "normalize", "--data", TOY, "--min-support", 99, "--out", tmp_path)
        assert code == 0 and "warning" in err
        assert last_json(out)["idioms"] == 0


class TestSplit:
    def test_six_manifests_and_replay(self, tmp_path, capsys):
        for name in ("a", "b"):
            code, _, _ = run(capsys, "split", "--data", TOY, "--m-new", 1, "--K", 1, "--n-splits", 6,
                             "--new-predicates", "meal", "--seed", 3, "--out", tmp_path / name)
            assert code == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == [f"split_{i}.json" for i in range(6)]
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_k_exceeding_pool(self, tmp_path, capsys):
        code, _, err = run(capsys, "split", "--data", TOY, "--m-new", 1, "--K", 5,
                           "--new-predicates", "meal", "--out", tmp_path)
        assert code == 3
        assert json.loads(err)["error"] == "InsufficientExamplesForPredicate"


class TestTraining:
    def test_pretrain_memorizes(self, pipeline):
        d, _ = pipeline
        assert (d / "pre" / "manifest.json").is_file() and (d / "pre" / "prior.json").is_file()

    def test_pretrain_loss(self, tmp_path, capsys, pipeline):
        d, split = pipeline
        code, out, _ = run(capsys, "pretrain", "--data", TOY, "--split", split, *TRAIN_FLAGS, "--out", tmp_path)
        assert code == 0 and last_json(out)["train_loss"] < 0.05
        for f in (d / "pre").iterdir():
            assert (tmp_path / f.name).read_bytes() == f.read_bytes()

    def test_finetune_then_eval_support(self, capsys, pipeline):
        d, split = pipeline
        code, out, _ = run(capsys, "eval", "--checkpoint", d / "ft", "--data", TOY, "--split", split,
                           "--on", "support", "--out", d / "rep.json")
        assert code == 0 and last_json(out)["exact_match_accuracy"] == 1.0
        assert json.loads((d / "rep.json").read_text())["exact_match_accuracy"] == 1.0

    def test_parse(self, capsys, pipeline):
        d, _ = pipeline
        code, out, _ = run(capsys, "parse", "--checkpoint", d / "ft", "list flights meal me0", "--beam", 3)
        assert code == 0
        assert out.strip() == "( lambda $0 e ( and ( flight $0 ) ( meal $0 me0:me ) ) )"

    def test_inputs_unchanged(self, pipeline):
        d, split = pipeline
        before = split.read_bytes(), TOY.read_bytes()
        cli.main(["eval", "--checkpoint", str(d / "ft"), "--data", str(TOY), "--split", str(split)])
        assert (split.read_bytes(), TOY.read_bytes()) == before


class TestEval:
    def test_wilcoxon_comparison(self, tmp_path, capsys):
        a, b = [], []
        for i in range(6):
            for name, acc, bucket in (("a", 0.5 + 0.05 * i, a), ("b", 0.3, b)):
                p = tmp_path / f"{name}{i}.json"
                p.write_text(json.dumps({"exact_match_accuracy": acc, "per_predicate": {}, "counts": {}}))
                bucket.append(p)
        code, out, _ = run(capsys, "eval", "--compare-a", *a, "--compare-b", *b)
        assert code == 0
        assert last_json(out)["p_value"] == pytest.approx(0.03125)

    def test_missing_arguments(self, capsys):
        code, _, err = run(capsys, "eval")
        assert code == 2 and json.loads(err)["error"] == "UsageError"


class TestErrors:
    def test_oracle_check_ok(self, capsys):
        code, out, _ = run(capsys, "oracle-check", "--data", TOY)
        assert code == 0 and last_json(out) == {"examples": 13, "failures": 0}

    def test_oracle_check_failure_is_invariant(self, capsys, monkeypatch):
        monkeypatch.setattr(cli, "execute", lambda acts: None)
        code, _, err = run(capsys, "oracle-check", "--data", TOY)
        assert code == 4 and json.loads(err)["error"] == "OracleRoundTripFailure"

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "oracle-check", "--data", tmp_path / "none.tsv")
        assert code == 3 and json.loads(err)["error"] == "FileNotFoundError"

    def test_malformed_line(self, tmp_path, capsys):
        p = tmp_path / "bad.tsv"
        p.write_text("no tab here\n")
        code, _, err = run(capsys, "oracle-check", "--data", p)
        assert code == 3 and json.loads(err)["error"] == "MalformedLine"

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"not_a_key": 1}')
        code, _, err = run(capsys, "pretrain", "--data", TOY, "--config", cfg, "--out", tmp_path / "o")
        assert code == 2 and json.loads(err)["error"] == "ConfigError"

    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["split", "--data", str(TOY)])
        assert info.value.code == 2
