"""Command-line surface for the full pipeline.

Subcommands: synth (synthetic corpus -> TSB directories), tok-train (one
domain's VQ tokenizer), tokenize (token CSV for a stored split), pretrain
(cross-domain masked token prediction), finetune (linear eval / full
fine-tuning), eval (masked-prediction + tokenizer quality of stored
artifacts), sweep (one-axis ablations), export (embeddings / attention /
tokens).

Every command accepts --seed and is bitwise-deterministic given it; commands
write only to paths named on the command line.  Settings resolve as flag >
config file > default, where the config file is INI-style with sections
[data], [tokenizer], [pretrain], [finetune] and unknown sections or keys are
rejected.  Exit codes: 0 success, 1 runtime failure (message on stderr),
2 usage error (usage text on stderr).
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

from .data import load_domain, save_domain, synth_corpus
from .downstream import FinetuneConfig, run_full_finetune, run_linear_eval, tokenized_split
from .experiments import (
    DEFAULT_SWEEP_VALUES,
    PipelinePlan,
    RunClock,
    SWEEP_AXES,
    emit_metrics,
    export_artifacts,
    metrics_record,
    run_sweep,
    write_tokens_csv,
)
from .pretrain import (
    PretrainConfig,
    build_token_space,
    load_checkpoint,
    load_external_weights,
    masked_eval,
    run_pretraining,
    save_checkpoint,
)
from .tokenizer import (
    TokenizerConfig,
    load_tokenizer,
    save_tokenizer,
    tokenize_dataset,
    tokenizer_metrics,
    train_tokenizer,
)


class UsageError(Exception):
    """Bad invocation or config file; reported with usage text, exit 2."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


CONFIG_SCHEMA = {
    "data": {"seed": int, "train_size": int, "test_size": int, "domains": str},
    "tokenizer": {"epochs": int, "codebook_size": int, "patch_size": int,
                  "batch_size": int, "lr": float, "reset_dead_codes": _parse_bool},
    "pretrain": {"epochs": int, "mask_ratio": float, "mixing": str,
                 "order": str, "batch_size": int, "lr": float},
    "finetune": {"epochs": int, "lr": float, "batch_size": int,
                 "train_fraction": float, "mode": str},
}


def load_config(path: str) -> dict:
    """Parse and validate an experiment config file."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"config file not found: {path}")
    resolved: dict = {}
    for section in parser.sections():
        schema = CONFIG_SCHEMA.get(section)
        if schema is None:
            raise UsageError(f"unknown config section [{section}] in {path}; "
                             f"expected one of {sorted(CONFIG_SCHEMA)}")
        for key, raw in parser[section].items():
            if key not in schema:
                raise UsageError(f"unknown key {key!r} in [{section}] of {path}; "
                                 f"expected one of {sorted(schema)}")
            try:
                resolved.setdefault(section, {})[key] = schema[key](raw)
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r} in [{section}]: {exc}")
    return resolved


class Settings:
    """Flag > config file > default resolution for one invocation."""

    def __init__(self, args):
        self.args = args
        path = getattr(args, "config", None)
        self.config = load_config(path) if path else {}

    def pick(self, section: str, key: str, default, flag: str | None = None):
        value = getattr(self.args, flag or key, None)
        if value is not None:
            return value
        section_map = self.config.get(section, {})
        if key in section_map:
            return section_map[key]
        return default

    def seed(self) -> int:
        return self.pick("data", "seed", 0, flag="seed")


def _split_csv(text: str) -> list:
    return [part for part in (piece.strip() for piece in text.split(",")) if part]


def _open_metrics(args):
    path = getattr(args, "metrics", None)
    return open(path, "w", encoding="utf-8") if path else None


def _clock(args) -> RunClock:
    return RunClock(fixed=bool(getattr(args, "fixed_clock", False)))


def _echo_config(payload: dict, path: str):
    with open(path, "w", encoding="utf-8") as sink:
        json.dump(payload, sink, indent=2, sort_keys=True)
        sink.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    settings = Settings(args)
    seed = settings.seed()
    train_size = settings.pick("data", "train_size", 240)
    test_size = settings.pick("data", "test_size", 120)
    domains = tuple(_split_csv(settings.pick("data", "domains", "motion,waves,beats")))
    corpus = synth_corpus(seed, train_size, test_size, domains=domains)
    os.makedirs(args.out, exist_ok=True)
    for name, (train, test) in corpus.items():
        save_domain(os.path.join(args.out, name), train, test)
        print(f"{name}: {len(train)} train + {len(test)} test instances "
              f"-> {os.path.join(args.out, name)}")
    _echo_config({"seed": seed, "train_size": train_size,
                  "test_size": test_size, "domains": list(domains)},
                 os.path.join(args.out, "config.json"))
    return 0


def _tokenizer_overrides(settings: Settings) -> dict:
    overrides = {}
    for key in ("epochs", "codebook_size", "patch_size", "batch_size", "lr"):
        value = settings.pick("tokenizer", key, None)
        if value is not None:
            overrides[key] = value
    reset = settings.pick("tokenizer", "reset_dead_codes", None)
    if reset is not None:
        overrides["reset_dead_codes"] = bool(reset)
    return overrides


def _cmd_tok_train(args) -> int:
    settings = Settings(args)
    seed = settings.seed()
    train, test = load_domain(args.domain)
    config = TokenizerConfig.for_meta(train.meta, **_tokenizer_overrides(settings))
    clock = _clock(args)
    stream = _open_metrics(args)
    stage = f"tokenizer/{train.meta.name}"
    try:
        def tick(row):
            if stream:
                emit_metrics(metrics_record(args.run_id, stage, row.epoch, "train",
                                            loss=row.loss, mse=row.mse,
                                            coverage=row.coverage,
                                            wall_seconds=clock.elapsed()), stream)
            print(f"epoch {row.epoch:3d}  loss={row.loss:.4f}  mse={row.mse:.4f}  "
                  f"coverage={row.coverage:.3f}")

        params, _ = train_tokenizer(train, config, seed=seed, progress=tick)
        quality = tokenizer_metrics(test, params, config)
        if stream:
            emit_metrics(metrics_record(args.run_id, stage, config.epochs, "test",
                                        mse=quality.mse, coverage=quality.coverage,
                                        wall_seconds=clock.elapsed()), stream)
    finally:
        if stream:
            stream.close()
    save_tokenizer(args.out, params, config, domain=train.meta.name, seed=seed)
    print(f"test mse={quality.mse:.4f} coverage={quality.coverage:.3f} -> {args.out}")
    return 0


def _cmd_tokenize(args) -> int:
    train, test = load_domain(args.domain)
    dataset = train if args.split == "train" else test
    params, config, manifest = load_tokenizer(args.tokenizer)
    if manifest["domain"] != dataset.meta.name:
        raise ValueError(f"tokenizer was trained on {manifest['domain']!r}, "
                         f"dataset is {dataset.meta.name!r}")
    tokens = tokenize_dataset(dataset, params, config)
    write_tokens_csv(tokens, args.out, run_id=args.run_id)
    print(f"{tokens.shape[0]} x {tokens.shape[1]} tokens -> {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    settings = Settings(args)
    seed = settings.seed()
    pairs = []
    corpora = {}
    for path in _split_csv(args.tokenizers):
        params, tok_config, manifest = load_tokenizer(path)
        domain = manifest["domain"]
        train, _ = load_domain(os.path.join(args.data, domain))
        corpora[domain] = tokenize_dataset(train, params, tok_config)
        pairs.append((domain, tok_config.codebook_size))
    space = build_token_space(pairs)
    order_text = settings.pick("pretrain", "order", "")
    config = PretrainConfig(
        ratio=settings.pick("pretrain", "mask_ratio", 0.45),
        lr=settings.pick("pretrain", "lr", 1e-4),
        batch_size=settings.pick("pretrain", "batch_size", 32),
        epochs=settings.pick("pretrain", "epochs", 20),
        mixing=settings.pick("pretrain", "mixing", "agnostic"),
        order=tuple(_split_csv(order_text)) if order_text else (),
        seed=seed)
    clock = _clock(args)
    stream = _open_metrics(args)
    try:
        def tick(row):
            if stream:
                emit_metrics(metrics_record(args.run_id, "pretrain", row["epoch"],
                                            "train", loss=row["loss"],
                                            masked_acc=row["masked_acc"],
                                            wall_seconds=clock.elapsed()), stream)
            print(f"epoch {row['epoch']:3d}  loss={row['loss']:.4f}  "
                  f"masked_acc={row['masked_acc']:.4f}")

        checkpoint, _ = run_pretraining(corpora, space, config, progress=tick)
    finally:
        if stream:
            stream.close()
    if args.external_weights:
        checkpoint = load_external_weights(args.external_weights, checkpoint)
        print(f"loaded external encoder weights from {args.external_weights}")
    save_checkpoint(checkpoint, args.out)
    print(f"checkpoint -> {args.out}")
    return 0


def _eval_stage(report, stage, run_id, stream, clock):
    for row in report.trace:
        emit_metrics(metrics_record(run_id, stage, row["epoch"], "train",
                                    loss=row["loss"],
                                    wall_seconds=clock.elapsed()), stream)
    emit_metrics(metrics_record(run_id, stage, len(report.trace), "test",
                                loss=report.loss, accuracy=report.accuracy,
                                macro_f1=report.macro_f1,
                                wall_seconds=clock.elapsed()), stream)


def _cmd_finetune(args) -> int:
    settings = Settings(args)
    seed = settings.seed()
    mode = settings.pick("finetune", "mode", "linear", flag="mode")
    if mode not in ("linear", "full"):
        raise UsageError(f"unknown finetune mode {mode!r}; expected linear or full")
    checkpoint = load_checkpoint(args.checkpoint)
    train, test = load_domain(args.domain)
    params, tok_config, manifest = load_tokenizer(args.tokenizer)
    if manifest["domain"] != train.meta.name:
        raise ValueError(f"tokenizer was trained on {manifest['domain']!r}, "
                         f"dataset is {train.meta.name!r}")
    train_split = tokenized_split(train, params, tok_config)
    test_split = tokenized_split(test, params, tok_config)
    config = FinetuneConfig(
        lr=settings.pick("finetune", "lr", 1e-4),
        batch_size=settings.pick("finetune", "batch_size", 32),
        epochs=settings.pick("finetune", "epochs", 10),
        seed=seed,
        train_fraction=settings.pick("finetune", "train_fraction", 1.0))
    clock = _clock(args)
    runner = run_linear_eval if mode == "linear" else run_full_finetune
    report = runner(checkpoint, train_split, test_split, config,
                    progress=lambda row: print(f"epoch {row['epoch']:3d}  "
                                               f"loss={row['loss']:.4f}"))
    stream = _open_metrics(args)
    if stream:
        try:
            _eval_stage(report, f"{mode}/{train.meta.name}", args.run_id,
                        stream, clock)
        finally:
            stream.close()
    payload = {
        "config": {"mode": mode, "seed": seed, "lr": config.lr,
                   "batch_size": config.batch_size, "epochs": config.epochs,
                   "train_fraction": config.train_fraction,
                   "domain": train.meta.name},
        "report": report.to_dict(),
    }
    _echo_config(payload, args.out)
    print(f"{mode} {train.meta.name}: accuracy={report.accuracy:.4f} "
          f"macro_f1={report.macro_f1:.4f} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    settings = Settings(args)
    seed = settings.seed()
    ratio = settings.pick("pretrain", "mask_ratio", 0.45, flag="mask_ratio")
    checkpoint = load_checkpoint(args.checkpoint)
    train, test = load_domain(args.domain)
    dataset = train if args.split == "train" else test
    params, tok_config, manifest = load_tokenizer(args.tokenizer)
    if manifest["domain"] != dataset.meta.name:
        raise ValueError(f"tokenizer was trained on {manifest['domain']!r}, "
                         f"dataset is {dataset.meta.name!r}")
    clock = _clock(args)
    quality = tokenizer_metrics(dataset, params, tok_config)
    tokens = tokenize_dataset(dataset, params, tok_config)
    masked = masked_eval(checkpoint, {dataset.meta.name: tokens}, ratio, seed=seed)
    stream = _open_metrics(args)
    if stream:
        try:
            emit_metrics(metrics_record(args.run_id, f"eval/{dataset.meta.name}",
                                        0, args.split, loss=masked["loss"],
                                        masked_acc=masked["masked_acc"],
                                        mse=quality.mse,
                                        coverage=quality.coverage,
                                        wall_seconds=clock.elapsed()), stream)
        finally:
            stream.close()
    payload = {
        "config": {"seed": seed, "mask_ratio": ratio, "split": args.split,
                   "domain": dataset.meta.name},
        "tokenizer": {"mse": quality.mse, "coverage": quality.coverage},
        "masked": masked,
    }
    _echo_config(payload, args.out)
    print(f"eval {dataset.meta.name}/{args.split}: mse={quality.mse:.4f} "
          f"coverage={quality.coverage:.3f} masked_acc={masked['masked_acc']:.4f} "
          f"-> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    settings = Settings(args)
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {args.axis!r}; "
                         f"expected one of {SWEEP_AXES}")
    values = _split_csv(args.values) if args.values else list(DEFAULT_SWEEP_VALUES[args.axis])
    order_text = settings.pick("pretrain", "order", "")
    plan = PipelinePlan(
        seed=settings.seed(),
        domains=tuple(_split_csv(settings.pick("data", "domains",
                                               "motion,waves,beats"))),
        train_size=settings.pick("data", "train_size", 48),
        test_size=settings.pick("data", "test_size", 24),
        tokenizer_epochs=settings.pick("tokenizer", "epochs", 4),
        codebook_size=settings.pick("tokenizer", "codebook_size", 512),
        patch_size=settings.pick("tokenizer", "patch_size", None),
        mask_ratio=settings.pick("pretrain", "mask_ratio", 0.45),
        mixing=settings.pick("pretrain", "mixing", "agnostic"),
        order=tuple(_split_csv(order_text)) if order_text else (),
        pretrain_epochs=settings.pick("pretrain", "epochs", 3,
                                      flag="pretrain_epochs"),
        pretrain_lr=settings.pick("pretrain", "lr", 1e-4),
        batch_size=settings.pick("pretrain", "batch_size", 32),
        finetune_epochs=settings.pick("finetune", "epochs", 3,
                                      flag="finetune_epochs"),
        finetune_lr=settings.pick("finetune", "lr", 1e-4),
        train_fraction=settings.pick("finetune", "train_fraction", 1.0))
    os.makedirs(args.out, exist_ok=True)
    clock = _clock(args)
    csv_path = os.path.join(args.out, f"sweep_{args.axis}.csv")
    jsonl_path = os.path.join(args.out, f"sweep_{args.axis}.jsonl")
    workers = args.parallel or 1
    stream = None
    try:
        if workers == 1:
            stream = open(os.path.join(args.out, "metrics.jsonl"), "w",
                          encoding="utf-8")
        rows = run_sweep(args.axis, values, plan, csv_path, jsonl_path,
                         metrics_stream=stream, clock=clock,
                         progress=lambda run_id: print(f"running {run_id}"),
                         workers=workers,
                         trial_root=os.path.join(args.out, "runs"))
    finally:
        if stream:
            stream.close()
    print(f"{len(rows)} rows -> {csv_path}")
    return 0


def _cmd_export(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    train, test = load_domain(args.domain)
    dataset = train if args.split == "train" else test
    params, tok_config, manifest = load_tokenizer(args.tokenizer)
    if manifest["domain"] != dataset.meta.name:
        raise ValueError(f"tokenizer was trained on {manifest['domain']!r}, "
                         f"dataset is {dataset.meta.name!r}")
    export_artifacts(args.what, checkpoint, dataset, (params, tok_config),
                     args.out, run_id=args.run_id, instance=args.instance,
                     limit=args.limit)
    print(f"{args.what} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tspretrain",
        description="Discrete tokenization and cross-domain masked-token "
                    "pre-training for time series classification.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (default 0; config [data] seed applies)")
    common.add_argument("--config", default=None,
                        help="INI config file with [data]/[tokenizer]/[pretrain]/[finetune]")
    common.add_argument("--run-id", default="run", help="label for metrics rows")
    common.add_argument("--metrics", default=None, help="append metrics JSONL here")
    common.add_argument("--fixed-clock", action="store_true",
                        help="report wall_seconds=0.0 for reproducible metrics files")

    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", parents=[common],
                       help="generate the synthetic multi-domain corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--train-size", type=int, default=None, dest="train_size")
    p.add_argument("--test-size", type=int, default=None, dest="test_size")
    p.add_argument("--domains", default=None, help="comma-separated domain names")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("tok-train", parents=[common],
                       help="train one domain's VQ tokenizer")
    p.add_argument("--domain", required=True, help="domain directory (from synth)")
    p.add_argument("--out", required=True, help="tokenizer checkpoint path (.nta)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--codebook-size", type=int, default=None, dest="codebook_size")
    p.add_argument("--patch-size", type=int, default=None, dest="patch_size")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--reset-dead-codes", action="store_true", default=None,
                   dest="reset_dead_codes",
                   help="re-seed unused codebook rows at epoch boundaries")
    p.set_defaults(handler=_cmd_tok_train)

    p = sub.add_parser("tokenize", parents=[common],
                       help="emit a token CSV for a stored split")
    p.add_argument("--domain", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_tokenize)

    p = sub.add_parser("pretrain", parents=[common],
                       help="cross-domain masked token prediction")
    p.add_argument("--data", required=True, help="corpus directory (from synth)")
    p.add_argument("--tokenizers", required=True,
                   help="comma-separated tokenizer checkpoints, one per domain")
    p.add_argument("--out", required=True, help="encoder checkpoint path (.nta)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--mask-ratio", type=float, default=None, dest="mask_ratio")
    p.add_argument("--mixing", choices=("agnostic", "sequential"), default=None)
    p.add_argument("--order", default=None,
                   help="comma-separated domain order for sequential mixing")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--external-weights", default=None, dest="external_weights",
                   help="overwrite encoder tensors from this archive after training")
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common],
                       help="linear evaluation or full fine-tuning on one domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--mode", choices=("linear", "full"), default=None)
    p.add_argument("--out", required=True, help="evaluation report JSON path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--train-fraction", type=float, default=None,
                   dest="train_fraction")
    p.set_defaults(handler=_cmd_finetune)

    p = sub.add_parser("eval", parents=[common],
                       help="masked-prediction and tokenizer quality of stored artifacts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--mask-ratio", type=float, default=None, dest="mask_ratio")
    p.add_argument("--out", required=True, help="evaluation JSON path")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="one-axis ablation sweep (CSV + JSONL tables)")
    p.add_argument("--axis", required=True,
                   help=f"one of {', '.join(SWEEP_AXES)}")
    p.add_argument("--values", default=None,
                   help="comma-separated values (default: the standard grid)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--domains", default=None, help="comma-separated domain names")
    p.add_argument("--train-size", type=int, default=None, dest="train_size")
    p.add_argument("--test-size", type=int, default=None, dest="test_size")
    p.add_argument("--tokenizer-epochs", type=int, default=None, dest="epochs")
    p.add_argument("--pretrain-epochs", type=int, default=None,
                   dest="pretrain_epochs")
    p.add_argument("--finetune-epochs", type=int, default=None,
                   dest="finetune_epochs")
    p.add_argument("--parallel", type=int, default=None, metavar="N",
                   help="run sweep values in N worker processes")
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("export", parents=[common],
                       help="export embeddings, attention maps, or tokens")
    p.add_argument("--what", choices=("embeddings", "attention", "tokens"),
                   required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--instance", type=int, default=0,
                   help="instance index for attention export")
    p.add_argument("--limit", type=int, default=None,
                   help="export at most this many instances")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_export)

    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    entry()
