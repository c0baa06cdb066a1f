"""Command-line workflows: generate, preprocess, train, evaluate, inspect.

Every command reads an optional JSON config file with three sections
("train", "synthetic", "paths"), applies command-line overrides, writes the
fully resolved config next to its outputs, and exits 0 only when the
requested artifact was completely written.  All randomness flows from the
seeds in the config, so rerunning a command reproduces its outputs byte for
byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import evaluation as ev
from .corpus import (CorpusError, DataBundle, build_bundle, corpus_stats,
                     extract_instances, filter_conversations,
                     preprocess_conversation, read_conversations,
                     write_conversations, write_instances)
from .snp import SnpError, prediction_record
from .synthetic import SyntheticConfig, SyntheticError, generate_synthetic
from .tdm import TdmError, topic_report
from .trainer import (TrainConfig, Trainer, TrainerError, build_topic_view,
                      joint_train, load_checkpoint, prepare_instances,
                      predict_scores, query_discourse_pis, restore_model,
                      save_checkpoint, topic_similarity_summary)

ABLATION_FLAGS = {"topic-init": "ablate_topic_init",
                  "disc-concat": "ablate_disc_concat",
                  "disc-att": "ablate_disc_att"}
ABLATION_LABELS = {"topic-init": "w/o Topic Init",
                   "disc-concat": "w/o Disc Concat",
                   "disc-att": "w/o Disc Att"}


class CliError(ValueError):
    """Bad invocation or config file; message is printed and exit is 1."""


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------


class RunConfig:
    def __init__(self, train: TrainConfig, synthetic: SyntheticConfig,
                 paths: dict[str, str]):
        self.train = train
        self.synthetic = synthetic
        self.paths = paths


_PATH_KEYS = ("corpus", "annotations", "model")


def _dataclass_from_dict(cls, data: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise CliError(f"unknown config key: {section}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_run_config(path: str | None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as e:
            raise CliError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise CliError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise CliError(f"config {path} must be a JSON object")
    for key in raw:
        if key not in ("train", "synthetic", "paths"):
            raise CliError(f"unknown config key: {key}")
    train = _dataclass_from_dict(TrainConfig, raw.get("train", {}), "train")
    synthetic = _dataclass_from_dict(SyntheticConfig, raw.get("synthetic", {}),
                                     "synthetic")
    paths = dict(raw.get("paths", {}))
    for key in paths:
        if key not in _PATH_KEYS:
            raise CliError(f"unknown config key: paths.{key}")
    return RunConfig(train, synthetic, paths)


def apply_overrides(rc: RunConfig, args: argparse.Namespace) -> None:
    if getattr(args, "seed", None) is not None:
        rc.train.seed = args.seed
        rc.synthetic.seed = args.seed
    if getattr(args, "lr", None) is not None:
        rc.train.learning_rate = args.lr
    if getattr(args, "precision", None) is not None:
        rc.train.precision_bits = args.precision
    for name in getattr(args, "ablate", None) or []:
        setattr(rc.train, ABLATION_FLAGS[name], True)
    for key in _PATH_KEYS:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            rc.paths[key] = value


def resolved_config(rc: RunConfig) -> dict:
    out = {"train": asdict(rc.train), "synthetic": asdict(rc.synthetic),
           "paths": dict(rc.paths)}
    out["synthetic"]["behavior_rates"] = list(rc.synthetic.behavior_rates)
    return out


def _write_resolved(rc: RunConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(resolved_config(rc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_out(args) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    return out


def _require_path(rc: RunConfig, key: str) -> str:
    if key not in rc.paths:
        raise CliError(f"no {key} path given (flag --{key} or config paths.{key})")
    return rc.paths[key]


def ablation_label(cfg: TrainConfig) -> str:
    parts = [label for name, label in ABLATION_LABELS.items()
             if getattr(cfg, ABLATION_FLAGS[name])]
    return " + ".join(parts) if parts else "full"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    rc = load_run_config(args.config)
    apply_overrides(rc, args)
    rc.synthetic.validate()
    out = _ensure_out(args)
    conversations, annotations, _ = generate_synthetic(rc.synthetic)
    write_conversations(os.path.join(out, "corpus.jsonl"), conversations)
    with open(os.path.join(out, "annotations.jsonl"), "w", encoding="utf-8") as fh:
        for record in annotations:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    _write_resolved(rc, out)
    print(f"wrote {len(conversations)} conversations and "
          f"{len(annotations)} annotations to {out}")
    return 0


def cmd_preprocess(args) -> int:
    rc = load_run_config(args.config)
    apply_overrides(rc, args)
    out = _ensure_out(args)
    raws = read_conversations(_require_path(rc, "corpus"))
    survivors = filter_conversations([preprocess_conversation(r) for r in raws])
    n_instances = sum(len(extract_instances(c)) for c in survivors)
    if n_instances == 0:
        for name in ("train_instances.jsonl", "valid_instances.jsonl",
                     "test_instances.jsonl"):
            write_instances(os.path.join(out, name), [])
        with open(os.path.join(out, "stats.txt"), "w", encoding="utf-8") as fh:
            fh.write("instances=0\n")
        _write_resolved(rc, out)
        print("warning: no conversation yielded an instance; outputs are empty",
              file=sys.stderr)
        return 0
    bundle = build_bundle(raws, seed=rc.train.seed)
    write_instances(os.path.join(out, "train_instances.jsonl"), bundle.train)
    write_instances(os.path.join(out, "valid_instances.jsonl"), bundle.valid)
    write_instances(os.path.join(out, "test_instances.jsonl"), bundle.test)
    stats = corpus_stats(bundle)
    lines = [f"{key}={stats[key]}" for key in stats]
    with open(os.path.join(out, "stats.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_resolved(rc, out)
    print("\n".join(lines))
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    apply_overrides(rc, args)
    rc.train.validate()
    out = _ensure_out(args)
    bundle = build_bundle(read_conversations(_require_path(rc, "corpus")),
                          seed=rc.train.seed)
    trainer = Trainer(rc.train, bundle)
    while (line := trainer.step_epoch()) is not None:
        print(line)
    result = trainer.run()
    save_checkpoint(os.path.join(out, "model.ckpt"), trainer.training_state())
    with open(os.path.join(out, "training.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.log) + "\n")
    _write_resolved(rc, out)
    best = "na" if result.best_valid is None else f"{result.best_f1:.6f}"
    print(f"finished: epochs={len(result.log)} best_val_f1={best} "
          f"diverged={result.diverged}")
    return 0


def _load_model(args, rc: RunConfig):
    state = load_checkpoint(_require_path(rc, "model"))
    bundle = build_bundle(read_conversations(_require_path(rc, "corpus")),
                          seed=state["config"]["seed"])
    cfg, tdm_params, snp_params, mu_w = restore_model(state, bundle)
    return cfg, bundle, tdm_params, snp_params, mu_w


def cmd_evaluate(args) -> int:
    rc = load_run_config(args.config)
    apply_overrides(rc, args)
    out = _ensure_out(args)
    cfg, bundle, tdm_params, snp_params, _ = _load_model(args, rc)
    requested = [ABLATION_LABELS[a] for a in (args.ablate or [])]
    actual = ablation_label(cfg)
    if requested and sorted(requested) != sorted(actual.split(" + ")):
        raise CliError(f"model was trained as {actual!r}, not "
                       f"{' + '.join(requested)!r}")
    prepared = prepare_instances(bundle, bundle.test)
    view = build_topic_view(tdm_params, bundle, prepared)
    scores = predict_scores(snp_params, cfg.snp_config(), prepared, view,
                            cfg.batch_size, pad_id=bundle.vocab.pad_index)
    labels = [p.label for p in prepared]
    report = ev.classification_metrics(scores, labels)
    sim = topic_similarity_summary(prepared, view)
    dist = ev.discourse_distribution_from_pi(query_discourse_pis(prepared, view),
                                             labels, cfg.n_behaviors)
    lines = [f"model={actual}", "split=test", report.as_text().rstrip("\n")]
    for key, value in sim.items():
        lines.append(f"{key}={value:.6f}" if isinstance(value, float)
                     else f"{key}={value}")
    lines.append("discourse_successful=" + ",".join(f"{v:.6f}" for v in dist[1]))
    lines.append("discourse_failed=" + ",".join(f"{v:.6f}" for v in dist[0]))
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _write_resolved(rc, out)
    print(text, end="")
    return 0


def cmd_inspect_topics(args) -> int:
    rc = load_run_config(args.config)
    apply_overrides(rc, args)
    _, bundle, tdm_params, _, _ = _load_model(args, rc)
    text = topic_report(tdm_params, bundle.vocab, n=args.n)
    if args.out is not None:
        out = _ensure_out(args)
        with open(os.path.join(out, "topics.txt"), "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
        _write_resolved(rc, out)
    print(text)
    return 0


def cmd_predict(args) -> int:
    rc = load_run_config(args.config)
    apply_overrides(rc, args)
    out = _ensure_out(args)
    cfg, bundle, tdm_params, snp_params, _ = _load_model(args, rc)
    split = {"train": bundle.train, "valid": bundle.valid,
             "test": bundle.test}[args.split]
    if not split:
        raise CliError(f"split {args.split} is empty")
    prepared = prepare_instances(bundle, split)
    view = build_topic_view(tdm_params, bundle, prepared)
    scores = predict_scores(snp_params, cfg.snp_config(), prepared, view,
                            cfg.batch_size, pad_id=bundle.vocab.pad_index)
    path = os.path.join(out, "predictions.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for p, score in zip(prepared, scores):
            record = prediction_record(p.instance.instance_id, score, p.label)
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    _write_resolved(rc, out)
    print(f"wrote {len(prepared)} predictions to {path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="newentry",
        description="Conversation new-entry success prediction workflows.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, default=None,
                       help="output directory (created if missing)")

    p = sub.add_parser("generate", help="write a synthetic corpus")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("preprocess", help="extract instances and statistics")
    common(p)
    p.add_argument("--corpus", default=None)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train the full model")
    common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATION_FLAGS),
                   default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score the test split of a corpus")
    common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--model", default=None, help="checkpoint file")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATION_FLAGS),
                   default=None, help="expected ablation of the checkpoint")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("inspect-topics", help="print top words per topic")
    common(p, out_required=False)
    p.add_argument("--corpus", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--n", type=int, default=5, help="words per row")
    p.set_defaults(fn=cmd_inspect_topics)

    p = sub.add_parser("predict", help="write per-instance probabilities")
    common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.set_defaults(fn=cmd_predict)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, CorpusError, TrainerError, TdmError, SnpError,
            SyntheticError, ev.EvalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
