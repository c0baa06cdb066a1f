"""End-to-end tests of the command-line entry points.

Commands are invoked in-process through ``cli.main`` so the tests stay fast;
every command is exercised against one small generated corpus shared by the
module.
"""

import json
import os

import pytest

from newentry import cli
from newentry.corpus import build_bundle, corpus_stats, read_conversations

CONFIG = {
    "train": {"n_topics": 4, "n_behaviors": 4, "hidden_size": 10,
              "tdm_hidden_size": 12, "embedding_size": 8,
              "tdm_pretrain_epochs": 2, "snp_pretrain_epochs": 1,
              "max_rounds": 1, "batch_size": 32, "seed": 5},
    "synthetic": {"n_conversations": 120, "n_users": 500, "seed": 5},
    "paths": {},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated corpus plus one trained model, reused by every test."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(CONFIG))
    assert cli.main(["generate", "--config", str(cfg_path),
                     "--out", str(root / "gen")]) == 0
    corpus = root / "gen" / "corpus.jsonl"
    assert cli.main(["train", "--config", str(cfg_path),
                     "--corpus", str(corpus),
                     "--out", str(root / "run")]) == 0
    return {"root": root, "cfg": str(cfg_path), "corpus": str(corpus),
            "model": str(root / "run" / "model.ckpt")}


def test_generate_is_deterministic(workspace, capsys):
    root = workspace["root"]
    assert cli.main(["generate", "--config", workspace["cfg"],
                     "--out", str(root / "gen2")]) == 0
    capsys.readouterr()
    for name in ("corpus.jsonl", "annotations.jsonl", "config.json"):
        assert (root / "gen" / name).read_bytes() == \
               (root / "gen2" / name).read_bytes()


def test_generate_writes_resolved_config(workspace):
    from dataclasses import fields

    from newentry.synthetic import SyntheticConfig
    from newentry.trainer import TrainConfig

    resolved = json.loads((workspace["root"] / "gen" / "config.json").read_text())
    assert set(resolved) == {"train", "synthetic", "paths"}
    assert resolved["synthetic"]["n_conversations"] == 120
    assert resolved["train"]["seed"] == 5
    # defaults are spelled out, not left implicit
    assert set(resolved["train"]) == {f.name for f in fields(TrainConfig)}
    assert set(resolved["synthetic"]) == {f.name for f in fields(SyntheticConfig)}
    assert resolved["train"]["learning_rate"] == 1e-3


def test_unknown_config_key_is_named(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"n_topicz": 3}}')
    assert cli.main(["generate", "--config", str(bad),
                     "--out", str(tmp_path / "x")]) == 1
    assert "train.n_topicz" in capsys.readouterr().err

    bad.write_text('{"trian": {}}')
    assert cli.main(["generate", "--config", str(bad),
                     "--out", str(tmp_path / "x")]) == 1
    assert "trian" in capsys.readouterr().err

    bad.write_text('{"paths": {"modle": "x"}}')
    assert cli.main(["generate", "--config", str(bad),
                     "--out", str(tmp_path / "x")]) == 1
    assert "paths.modle" in capsys.readouterr().err


def test_invalid_json_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["generate", "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == 1
    assert "JSON" in capsys.readouterr().err


def test_seed_override_applies_to_both_sections(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["generate", "--seed", "99", "--out", str(out)]) == 0
    capsys.readouterr()
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["train"]["seed"] == 99
    assert resolved["synthetic"]["seed"] == 99


def test_preprocess_stats_match_recount(workspace, tmp_path, capsys):
    assert cli.main(["preprocess", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    stats_text = (tmp_path / "stats.txt").read_text()
    assert printed.strip() == stats_text.strip()

    parsed = dict(line.split("=", 1) for line in stats_text.strip().splitlines())
    bundle = build_bundle(read_conversations(workspace["corpus"]),
                          seed=CONFIG["train"]["seed"])
    expected = corpus_stats(bundle)
    assert set(parsed) == set(str(k) for k in expected)
    for key, value in expected.items():
        assert parsed[key] == str(value)
    assert int(parsed["train_instances"]) == len(bundle.train)
    # written splits agree with the stats
    for name, split in (("train", bundle.train), ("valid", bundle.valid),
                        ("test", bundle.test)):
        lines = (tmp_path / f"{name}_instances.jsonl").read_text().splitlines()
        assert len(lines) == len(split)


def test_preprocess_empty_filter_warns_and_exits_zero(tmp_path, capsys):
    corpus = tmp_path / "tiny.jsonl"
    corpus.write_text(json.dumps({
        "conversation_id": "solo",
        "turns": [{"turn_id": "t0", "author_id": "a",
                   "reply_to": None, "text": "hi"}]}) + "\n")
    out = tmp_path / "out"
    assert cli.main(["preprocess", "--corpus", str(corpus),
                     "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err
    for name in ("train", "valid", "test"):
        assert (out / f"{name}_instances.jsonl").read_text() == ""
    assert (out / "config.json").exists()


def test_train_artifacts_and_determinism(workspace, capsys):
    root = workspace["root"]
    run = root / "run"
    assert (run / "model.ckpt").exists()
    log_lines = (run / "training.log").read_text().strip().splitlines()
    # 2 tdm pretrain + 1 snp pretrain + 1 joint round of (tdm, snp)
    assert len(log_lines) == 5
    assert all("epoch=" in line and "phase=" in line for line in log_lines)

    assert cli.main(["train", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--out", str(root / "run2")]) == 0
    capsys.readouterr()
    assert (root / "run2" / "model.ckpt").read_bytes() == \
           (run / "model.ckpt").read_bytes()
    assert (root / "run2" / "training.log").read_bytes() == \
           (run / "training.log").read_bytes()


def test_evaluate_writes_full_label_report(workspace, tmp_path, capsys):
    assert cli.main(["evaluate", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--model", workspace["model"],
                     "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    report = (tmp_path / "report.txt").read_text()
    assert printed == report
    assert report.startswith("model=full\n")
    for key in ("auc=", "f1=", "mean_similarity_successful=",
                "discourse_successful=", "n_skipped_no_history="):
        assert key in report


def test_evaluate_rejects_mismatched_ablation(workspace, tmp_path, capsys):
    assert cli.main(["evaluate", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--model", workspace["model"],
                     "--out", str(tmp_path),
                     "--ablate", "topic-init"]) == 1
    err = capsys.readouterr().err
    assert "full" in err and "Topic Init" in err


def test_ablated_train_and_evaluate_label(workspace, tmp_path, capsys):
    out = tmp_path / "ab"
    assert cli.main(["train", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--ablate", "topic-init",
                     "--out", str(out)]) == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["train"]["ablate_topic_init"] is True
    assert cli.main(["evaluate", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--model", str(out / "model.ckpt"),
                     "--ablate", "topic-init",
                     "--out", str(tmp_path / "ev")]) == 0
    capsys.readouterr()
    report = (tmp_path / "ev" / "report.txt").read_text()
    assert report.startswith("model=w/o Topic Init\n")


def test_inspect_topics_row_counts(workspace, tmp_path, capsys):
    assert cli.main(["inspect-topics", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--model", workspace["model"],
                     "--n", "5", "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    text = (tmp_path / "topics.txt").read_text()
    lines = [l for l in text.strip().splitlines() if l.strip()]
    topic_rows = [l for l in lines if l.startswith("topic ")]
    behavior_rows = [l for l in lines if l.startswith("behavior ")]
    assert len(topic_rows) == CONFIG["train"]["n_topics"]
    assert len(behavior_rows) == CONFIG["train"]["n_behaviors"]
    # five word:probability pairs per row
    assert all(len(row.split(": ", 1)[1].split()) == 5 for row in lines)
    assert printed.strip() == text.strip()


def test_predict_covers_every_instance_including_no_history(
        workspace, tmp_path, capsys):
    assert cli.main(["predict", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--model", workspace["model"],
                     "--split", "test", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    records = [json.loads(line) for line in
               (tmp_path / "predictions.jsonl").read_text().splitlines()]
    bundle = build_bundle(read_conversations(workspace["corpus"]),
                          seed=CONFIG["train"]["seed"])
    assert len(records) == len(bundle.test)
    by_id = {inst.instance_id: inst for inst in bundle.test}
    no_history = [inst for inst in bundle.test
                  if not bundle.history.conversations_for(
                      inst.newcomer_id, exclude=inst.conversation_id)]
    assert no_history, "corpus should contain a newcomer without history"
    for record in records:
        inst = by_id[record["instance_id"]]
        assert record["gold"] == inst.label
        assert 0.0 <= record["probability"] <= 1.0
        assert record["predicted"] == int(record["probability"] >= 0.5)


def test_missing_model_path_errors(workspace, tmp_path, capsys):
    assert cli.main(["evaluate", "--config", workspace["cfg"],
                     "--corpus", workspace["corpus"],
                     "--out", str(tmp_path)]) == 1
    assert "model" in capsys.readouterr().err


def test_commands_do_not_mutate_inputs(workspace, tmp_path, capsys):
    corpus_before = open(workspace["corpus"], "rb").read()
    model_before = open(workspace["model"], "rb").read()
    cli.main(["preprocess", "--corpus", workspace["corpus"],
              "--out", str(tmp_path / "p")])
    cli.main(["predict", "--config", workspace["cfg"],
              "--corpus", workspace["corpus"],
              "--model", workspace["model"], "--out", str(tmp_path / "q")])
    capsys.readouterr()
    assert open(workspace["corpus"], "rb").read() == corpus_before
    assert open(workspace["model"], "rb").read() == model_before
