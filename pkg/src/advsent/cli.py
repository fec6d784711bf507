"""Command-line entry point: prepare, generate, stats, train, evaluate, llm-eval.

Settings resolve as defaults < ``--config`` JSON file < command-line flags,
and every command writes the resolved values to ``effective_config.json``
in its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import corpus, datagen, llmeval, model, plotting, trainer
from .evaluation import build_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

logger = logging.getLogger("advsent")


class ConfigError(Exception):
    pass


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _resolve(cls, file_values: dict, flags: dict):
    """Build dataclass ``cls`` from defaults, then file values, then non-None flags."""
    known = {f.name for f in fields(cls)}
    unknown = set(file_values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys in config file: {sorted(unknown)}")
    values = dict(file_values)
    values.update({k: v for k, v in flags.items() if v is not None and k in known})
    try:
        obj = cls(**values)
        obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc
    return obj


def _write_effective(out_dir: Path, command: str, sections: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **sections}
    (out_dir / "effective_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read(path) -> corpus.Dataset:
    try:
        return corpus.read_jsonl(path)
    except OSError as exc:
        raise corpus.SchemaError(f"cannot read {path}: {exc}") from exc


# --- commands ----------------------------------------------------------------

def cmd_prepare(args) -> int:
    ds = _read(args.input)
    ds = corpus.normalize_dataset(ds)
    flags: list[corpus.QualityFlag] = []
    if args.detector == "keyword":
        flags = corpus.verify_language(ds, corpus.KeywordDetector(), args.min_confidence)
    ds, removed = corpus.deduplicate(ds)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.write_jsonl(ds, out)
    if args.flags_out:
        with open(args.flags_out, "w", encoding="utf-8") as fh:
            for f in flags:
                fh.write(json.dumps(f.to_dict()) + "\n")
    _write_effective(out.parent, "prepare", {"prepare": {
        "input": str(args.input), "output": str(out), "detector": args.detector,
        "min_confidence": args.min_confidence}})
    print(f"{len(ds)} records written, {removed} removed, {len(flags)} flagged")
    return EXIT_OK


def cmd_generate(args) -> int:
    overrides = {"seed": args.seed, "per_cell": args.per_cell, "rho_train": args.rho_train,
                 "rho_test": args.rho_test}
    cfg = _resolve(datagen.GenConfig, _load_config_file(args.config).get("generate", {}), overrides)
    ds = datagen.generate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in corpus.Split:
        corpus.write_jsonl(ds.where(split=split), out / f"{split.value}.jsonl")
    _write_effective(out, "generate", {"generate": cfg.to_dict()})
    print(f"{len(ds)} records written to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    ds = corpus.load_many(args.inputs)
    stats = corpus.compute_stats(ds)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    table = stats.to_table()
    (out / "stats.txt").write_text(table + "\n")
    if not args.no_figures:
        plotting.rating_distribution(ds, out / "rating_distribution.png")
        plotting.token_distribution(ds, out / "token_distribution.png")
    _write_effective(out, "stats", {"stats": {"inputs": [str(p) for p in args.inputs]}})
    print(table)
    return EXIT_OK


def _train_flags(args) -> dict:
    return {"mode": args.mode, "seed": args.seed, "lr": args.lr, "batch_size": args.batch_size,
            "max_epochs": args.max_epochs, "patience": args.patience, "meta_lr": args.meta_lr,
            "meta_interval": args.meta_interval, "hash_dim": args.hash_dim, "hidden": args.hidden}


def cmd_train(args) -> int:
    cfg = _resolve(trainer.TrainConfig, _load_config_file(args.config).get("train", {}), _train_flags(args))
    train_ds, valid_ds = _read(args.train), _read(args.valid)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(out, "train", {"train": cfg.to_dict(), "data": {"train": str(args.train),
                                                                      "valid": str(args.valid)}})
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        result = trainer.train(cfg, train_ds, valid_ds, log_sink=lambda e: fh.write(json.dumps(e) + "\n"))
    model.save_checkpoint(result.params, out / "model.ckpt", meta={
        "hash_dim": cfg.hash_dim, "max_tokens": cfg.max_tokens, "mode": cfg.mode.value,
        "best_epoch": result.best_epoch, "seed": cfg.seed})
    if not args.no_figures:
        plotting.training_curves(result.log, out / "training_curves.png")
    print(f"best epoch {result.best_epoch}: validation macro-F1 {result.best_val_f1:.2f}, "
          f"lambda ({result.lam[0]:.4f}, {result.lam[1]:.4f})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, meta = model.load_checkpoint(args.checkpoint)
    test_ds = _read(args.test)
    fz = model.Featurizer(meta.get("hash_dim", params.input_dim), meta.get("max_tokens", 128))
    preds = model.predict_ratings(params, fz.batch((r.title, r.text) for r in test_ds))
    report = build_report(test_ds, preds, aggregate=args.aggregate)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    table = report.to_table(label=meta.get("mode", "model"))
    (out / "report.txt").write_text(table + "\n")
    if not args.no_figures:
        plotting.metrics_bars(report, out / "report.png", label=meta.get("mode", ""))
    _write_effective(out, "evaluate", {"evaluate": {"checkpoint": str(args.checkpoint), "test": str(args.test),
                                                    "aggregate": args.aggregate}})
    print(table)
    return EXIT_OK


def cmd_llm_eval(args) -> int:
    flags = {"endpoint": args.endpoint, "model": args.model, "timeout": args.timeout, "retries": args.retries,
             "max_in_flight": args.max_in_flight}
    file_cfg = _load_config_file(args.config).get("llm", {})
    cfg = _resolve(_ValidatedCompletionConfig, file_cfg, flags)
    test_ds = _read(args.test)
    train_ds = _read(args.train) if args.train else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(out, "llm-eval", {"llm": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
                                       "shots": args.shots, "seed": args.seed})
    with open(out / "llm_log.jsonl", "w", encoding="utf-8") as fh:
        result = llmeval.evaluate(test_ds.records, cfg, train_ds, args.shots, args.seed,
                                  log_sink=lambda e: fh.write(json.dumps(e) + "\n"))
    (out / "report.json").write_text(json.dumps({**result.report.to_dict(), "parse_failures": result.parse_failures,
                                                 "errors": result.errors}, indent=2) + "\n")
    table = result.report.to_table(label=f"{cfg.model} k={args.shots}")
    (out / "report.txt").write_text(table + "\n")
    if not args.no_figures:
        plotting.metrics_bars(result.report, out / "report.png", label=f"{cfg.model} k={args.shots}")
    print(table)
    print(f"parse failures: {result.parse_failures}, endpoint errors: {result.errors}")
    return EXIT_OK


class _ValidatedCompletionConfig(llmeval.CompletionConfig):
    def validate(self) -> None:
        if self.temperature != 0.0:
            raise ValueError("evaluation runs use greedy decoding (temperature 0.0)")
        if self.max_new_tokens <= 0 or self.retries < 0 or self.timeout <= 0:
            raise ValueError("max_new_tokens and timeout must be positive, retries non-negative")


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advsent", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="normalize, verify language, deduplicate")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--detector", choices=("none", "keyword"), default="none")
    s.add_argument("--min-confidence", type=float, default=corpus.LOW_CONFIDENCE)
    s.add_argument("--flags-out", help="write quality flags as JSON lines")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("generate", help="write a synthetic train/valid/test corpus")
    s.add_argument("out_dir")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--per-cell", type=int)
    s.add_argument("--rho-train", type=float)
    s.add_argument("--rho-test", type=float)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("stats", help="corpus statistics, table and figures")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out-dir", default="stats")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train a model; writes checkpoint, log and figures")
    s.add_argument("train")
    s.add_argument("valid")
    s.add_argument("--out-dir", default="run")
    s.add_argument("--config")
    s.add_argument("--mode", choices=[m.value for m in trainer.Mode])
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--meta-lr", type=float)
    s.add_argument("--meta-interval", type=int)
    s.add_argument("--hash-dim", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint on a test split")
    s.add_argument("checkpoint")
    s.add_argument("test")
    s.add_argument("--out-dir", default="eval")
    s.add_argument("--aggregate", choices=("pool", "mean"), default="pool")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("llm-eval", help="few-shot evaluation against a completion endpoint")
    s.add_argument("test")
    s.add_argument("--train", help="source of few-shot examples")
    s.add_argument("--shots", type=int, default=0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out-dir", default="llm")
    s.add_argument("--config")
    s.add_argument("--endpoint")
    s.add_argument("--model")
    s.add_argument("--timeout", type=float)
    s.add_argument("--retries", type=int)
    s.add_argument("--max-in-flight", type=int)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_llm_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (corpus.SchemaError, corpus.EmptyDatasetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainer.NonFiniteGradientError, llmeval.EndpointError, llmeval.ProtocolError, ValueError,
            OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
