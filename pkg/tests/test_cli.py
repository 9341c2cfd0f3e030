"""Command-line behavior: exit codes, artifacts on disk, layered config."""

import json
from pathlib import Path

import pytest

from nutsearch.cli import main
from nutsearch.textdata import sentiment_lexicon


def run_cli(*argv) -> int:
    return main(list(argv))


# ---------------------------------------------------------------------------
# tiny artifacts shared across the module: one corpus, three 1-epoch models


@pytest.fixture(scope="module")
def workbench(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_workbench")
    data = root / "data"
    paths = {
        "root": root,
        "data": data,
        "victim": root / "victim.ckpt",
        "lm": root / "lm.ckpt",
        "arae": root / "arae.ckpt",
    }
    assert run_cli("make-synth", "--out-dir", str(data), "--train-size",
                   "60", "--dev-size", "24", "--test-size", "24") == 0
    assert run_cli("train-classifier", "--data-dir", str(data), "--arch",
                   "bag", "--out", str(paths["victim"]), "--epochs", "1") == 0
    assert run_cli("train-lm", "--data-dir", str(data), "--out",
                   str(paths["lm"]), "--epochs", "1") == 0
    assert run_cli("train-arae", "--data-dir", str(data), "--out",
                   str(paths["arae"]), "--epochs", "1") == 0
    return paths


def _attack_args(wb, out_dir, *extra):
    return ("attack", "--data-dir", str(wb["data"]), "--arae",
            str(wb["arae"]), "--victim", str(wb["victim"]), "--lm",
            str(wb["lm"]), "--out-dir", str(out_dir), "--attacked-class",
            "1", "--steps", "2", "--n-inits", "2", "--batch-size", "8",
            "--eta", "10") + extra


# ---------------------------------------------------------------------------
# exit codes


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        run_cli("--help")
    assert exc.value.code == 0


def test_no_subcommand_exits_two():
    with pytest.raises(SystemExit) as exc:
        run_cli()
    assert exc.value.code == 2


def test_unknown_subcommand_exits_two():
    with pytest.raises(SystemExit) as exc:
        run_cli("explode")
    assert exc.value.code == 2


def test_bad_flag_value_exits_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("make-synth", "--out-dir", str(tmp_path), "--seed", "lots")
    assert exc.value.code == 2


def test_unknown_config_file_key_exits_two(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("not_a_real_knob = 1\n")
    assert run_cli("make-synth", "--out-dir", str(tmp_path / "d"),
                   "--config", str(cfg)) == 2


def test_data_dir_without_corpus_exits_two(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run_cli("train-lm", "--data-dir", str(empty), "--out",
                   str(tmp_path / "lm.ckpt"), "--epochs", "1") == 2


def test_corrupt_checkpoint_exits_one(tmp_path, workbench):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"these are not the bytes you are looking for")
    assert run_cli("transfer", "--data-dir", str(workbench["data"]),
                   "--victim", str(bad), "--selected", str(bad), "--out",
                   str(tmp_path / "t.json"), "--attacked-class", "1") == 1


def test_missing_checkpoint_file_exits_one(tmp_path, workbench):
    assert run_cli("transfer", "--data-dir", str(workbench["data"]),
                   "--victim", str(tmp_path / "nope.ckpt"), "--selected",
                   str(tmp_path / "nope.json"), "--out",
                   str(tmp_path / "t.json"), "--attacked-class", "1") == 1


def test_bad_attacked_class_exits_two(tmp_path, workbench):
    out = tmp_path / "atk"
    argv = list(_attack_args(workbench, out))
    argv[argv.index("--attacked-class") + 1] = "7"
    assert run_cli(*argv) == 2


def test_random_arae_without_generator_exits_two(tmp_path, workbench):
    assert run_cli("attack-baseline", "--kind", "random-arae", "--data-dir",
                   str(workbench["data"]), "--victim",
                   str(workbench["victim"]), "--lm", str(workbench["lm"]),
                   "--out-dir", str(tmp_path / "b"), "--attacked-class",
                   "1", "--n-inits", "2") == 2


# ---------------------------------------------------------------------------
# make-synth artifacts


def test_make_synth_writes_corpus(tmp_path):
    out = tmp_path / "corpus"
    assert run_cli("make-synth", "--out-dir", str(out), "--train-size",
                   "30", "--dev-size", "10", "--test-size", "10") == 0
    for part, n in (("train", 30), ("dev", 10), ("test", 10)):
        lines = (out / f"{part}.tsv").read_text().splitlines()
        assert len(lines) == n
        label, text = lines[0].split("\t")
        assert label in ("0", "1") and text
    meta = json.loads((out / "meta.json").read_text())
    assert meta["task"] == "sentiment"
    assert meta["seed"] == 11
    assert len(meta["config_hash"]) == 16
    lex = (out / "lexicon.txt").read_text().split()
    assert len(lex) == len(sentiment_lexicon())


def test_make_synth_nli_pairs(tmp_path):
    out = tmp_path / "nli"
    assert run_cli("make-synth", "--out-dir", str(out), "--task", "nli",
                   "--train-size", "30", "--dev-size", "10", "--test-size",
                   "10") == 0
    first = (out / "train.tsv").read_text().splitlines()[0]
    assert len(first.split("\t")) == 3


def test_make_synth_unknown_task_exits_two(tmp_path):
    assert run_cli("make-synth", "--out-dir", str(tmp_path / "x"),
                   "--task", "poetry") == 2


# ---------------------------------------------------------------------------
# config precedence through the real CLI, one layer pair at a time


def _synth_seed(tmp_path, name, *extra) -> int:
    out = tmp_path / name
    assert run_cli("make-synth", "--out-dir", str(out), "--train-size",
                   "12", "--dev-size", "4", "--test-size", "4", *extra) == 0
    return json.loads((out / "meta.json").read_text())["seed"]


def test_cli_defaults_apply(tmp_path):
    assert _synth_seed(tmp_path, "a") == 11


def test_cli_file_overrides_defaults(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 5\n")
    assert _synth_seed(tmp_path, "b", "--config", str(cfg)) == 5


def test_cli_flag_overrides_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 5\n")
    assert _synth_seed(tmp_path, "c", "--config", str(cfg), "--seed",
                       "7") == 7


def test_cli_flag_overrides_defaults(tmp_path):
    assert _synth_seed(tmp_path, "d", "--seed", "7") == 7


# ---------------------------------------------------------------------------
# training artifacts


def test_train_writes_metrics_file(tmp_path, workbench):
    out = tmp_path / "m.jsonl"
    assert run_cli("train-lm", "--data-dir", str(workbench["data"]),
                   "--out", str(tmp_path / "lm.ckpt"), "--epochs", "2",
                   "--metrics", str(out)) == 0
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all("dev_ce" in r for r in rows)


def test_classifier_arch_corpus_mismatch_exits_two(tmp_path, workbench):
    assert run_cli("train-classifier", "--data-dir", str(workbench["data"]),
                   "--arch", "pair", "--out", str(tmp_path / "p.ckpt"),
                   "--epochs", "1") == 2


# ---------------------------------------------------------------------------
# attack and baseline artifacts


def test_attack_writes_candidates_and_selected(tmp_path, workbench):
    out = tmp_path / "atk"
    assert run_cli(*_attack_args(workbench, out)) == 0
    lines = (out / "candidates.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) >= {"init_seed", "tokens", "m1_dev", "m2", "score",
                        "kind", "config_hash"}
    sel = json.loads((out / "selected.json").read_text())
    assert sel["kind"] == "nuts"
    assert len(sel["tokens"]) == 3
    assert "m1_test" in sel
    assert sel["score"] == pytest.approx(sel["m1_dev"] + 0.05 * sel["m2"])


def test_attack_trigger_avoids_excluded_lexicon(tmp_path, workbench):
    out = tmp_path / "atk"
    assert run_cli(*_attack_args(workbench, out)) == 0
    sel = json.loads((out / "selected.json").read_text())
    assert not set(sel["tokens"]) & sentiment_lexicon()


def test_attack_rerun_is_byte_identical(tmp_path, workbench):
    out1, out2 = tmp_path / "one", tmp_path / "two"
    assert run_cli(*_attack_args(workbench, out1)) == 0
    assert run_cli(*_attack_args(workbench, out2)) == 0
    assert ((out1 / "candidates.jsonl").read_bytes()
            == (out2 / "candidates.jsonl").read_bytes())
    assert ((out1 / "selected.json").read_bytes()
            == (out2 / "selected.json").read_bytes())


@pytest.mark.parametrize("kind,n_records", [("random-seq", 2),
                                            ("random-arae", 2),
                                            ("token-gradient", 1)])
def test_baselines_write_artifacts(tmp_path, workbench, kind, n_records):
    out = tmp_path / kind
    assert run_cli("attack-baseline", "--kind", kind, "--data-dir",
                   str(workbench["data"]), "--arae", str(workbench["arae"]),
                   "--victim", str(workbench["victim"]), "--lm",
                   str(workbench["lm"]), "--out-dir", str(out),
                   "--attacked-class", "1", "--n-inits", "2",
                   "--max-sweeps", "1", "--top-k", "2",
                   "--beam-width", "1") == 0
    lines = (out / "candidates.jsonl").read_text().splitlines()
    assert len(lines) == n_records
    sel = json.loads((out / "selected.json").read_text())
    assert sel["kind"] == kind
    assert len(sel["tokens"]) == 3


# ---------------------------------------------------------------------------
# evaluate / transfer / stats artifacts


@pytest.fixture(scope="module")
def attack_dir(workbench, tmp_path_factory):
    out = tmp_path_factory.mktemp("attack_out")
    assert run_cli(*_attack_args(workbench, out)) == 0
    return out


def test_evaluate_report(tmp_path, workbench, attack_dir):
    out_json = tmp_path / "report.json"
    out_text = tmp_path / "report.txt"
    assert run_cli("evaluate", "--data-dir", str(workbench["data"]),
                   "--victim", str(workbench["victim"]), "--lm",
                   str(workbench["lm"]), "--selected",
                   str(attack_dir / "selected.json"), "--attacked-class",
                   "1", "--out-json", str(out_json), "--out-text",
                   str(out_text)) == 0
    rep = json.loads(out_json.read_text())
    assert rep["task"] == "sentiment"
    assert rep["attack_kind"] == "nuts"
    assert set(rep["clean_acc"]) == {"0", "1"}
    assert rep["attacked_acc"] == rep["m1_test"]
    assert rep["stat_deltas"].keys() == {"lm_ce", "word_freq_normalized"}
    text = out_text.read_text()
    assert "m1 dev" in text and "config hash" in text


def test_transfer_output(tmp_path, workbench, attack_dir):
    out = tmp_path / "transfer.json"
    assert run_cli("transfer", "--data-dir", str(workbench["data"]),
                   "--victim", str(workbench["victim"]), "--selected",
                   str(attack_dir / "selected.json"), "--attacked-class",
                   "1", "--out", str(out)) == 0
    res = json.loads(out.read_text())
    assert res["drop"] == pytest.approx(res["clean"] - res["attacked"])
    assert res["trigger"] == json.loads(
        (attack_dir / "selected.json").read_text())["tokens"]


def test_stats_output(tmp_path, attack_dir):
    out = tmp_path / "stats.json"
    assert run_cli("stats", "--candidates",
                   str(attack_dir / "candidates.jsonl"), "--out",
                   str(out)) == 0
    stats = json.loads(out.read_text())
    assert stats["count"] == 2
    assert set(stats) >= {"mean_m1", "std_m1", "mean_m2", "std_m2",
                          "pearson", "pearson_defined"}


def test_stats_empty_dump_exits_two(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run_cli("stats", "--candidates", str(empty), "--out",
                   str(tmp_path / "s.json")) == 2


def test_output_parent_directories_are_created(tmp_path, workbench,
                                               attack_dir):
    ckpt = tmp_path / "deep" / "nested" / "victim.ckpt"
    metrics = tmp_path / "m" / "dir" / "metrics.jsonl"
    assert run_cli("train-classifier", "--data-dir", str(workbench["data"]),
                   "--arch", "bag", "--out", str(ckpt), "--metrics",
                   str(metrics), "--epochs", "1") == 0
    assert ckpt.is_file() and metrics.is_file()
    stats_out = tmp_path / "s" / "stats.json"
    assert run_cli("stats", "--candidates",
                   str(attack_dir / "candidates.jsonl"), "--out",
                   str(stats_out)) == 0
    assert stats_out.is_file()
