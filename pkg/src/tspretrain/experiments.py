"""Experiment orchestration: full pipelines, ablation sweeps, artifact export.

A pipeline run goes synthetic corpus -> per-domain tokenizers -> cross-domain
pre-training -> per-domain linear eval and full fine-tuning, streaming every
stage's progress as metrics records (one JSON object per line).  Sweeps repeat
the pipeline along one axis and tabulate the final metrics as CSV + JSONL;
exports serialize embeddings, attention maps, or token streams for external
plotting.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import DomainDataset, synth_corpus
from .downstream import (
    EvalReport,
    FinetuneConfig,
    run_full_finetune,
    run_linear_eval,
    tokenized_split,
)
from .nta import save_nta
from .pretrain import (
    EncoderCheckpoint,
    PretrainConfig,
    build_token_space,
    run_pretraining,
)
from .tokenizer import (
    TokenizerConfig,
    tokenize_dataset,
    tokenizer_metrics,
    train_tokenizer,
)
from .transformer import attention_maps, encoder_forward

METRICS_FIELDS = ("run_id", "stage", "epoch", "split", "loss", "accuracy",
                  "macro_f1", "coverage", "mse", "masked_acc", "wall_seconds")


class RunClock:
    """Wall-clock source for metrics records.

    In fixed mode every reading is 0.0, so repeated runs with equal seeds
    produce byte-identical metrics streams.
    """

    def __init__(self, fixed: bool = False):
        self.fixed = fixed
        self._start = time.perf_counter()

    def elapsed(self) -> float:
        return 0.0 if self.fixed else time.perf_counter() - self._start


def metrics_record(run_id: str, stage: str, epoch: int, split: str,
                   **values) -> dict:
    """One metrics row with the full stable key set; absent metrics are None."""
    unknown = set(values) - set(METRICS_FIELDS)
    if unknown:
        raise ValueError(f"unknown metrics fields: {sorted(unknown)}")
    record = dict.fromkeys(METRICS_FIELDS)
    record.update(run_id=run_id, stage=stage, epoch=int(epoch), split=split)
    record.update(values)
    if record["wall_seconds"] is None:
        record["wall_seconds"] = 0.0
    if record["wall_seconds"] < 0:
        raise ValueError("wall_seconds must be >= 0")
    return record


def emit_metrics(record: dict, stream) -> str:
    """Append one self-contained JSON line and flush."""
    missing = [key for key in METRICS_FIELDS if key not in record]
    if missing:
        raise ValueError(f"metrics record missing fields: {missing}")
    line = json.dumps({key: record[key] for key in METRICS_FIELDS})
    stream.write(line + "\n")
    stream.flush()
    return line


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class PipelinePlan:
    """Resolved settings for one end-to-end run.

    One seed drives every stage; each stage derives its own substreams, so
    the whole pipeline is bitwise-deterministic given the plan.
    """

    seed: int = 0
    domains: tuple = ("motion", "waves", "beats")
    train_size: int = 240
    test_size: int = 120
    tokenizer_epochs: int = 30
    codebook_size: int = 512
    patch_size: int | None = None  # None keeps each domain's native patch
    reset_dead_codes: bool = True
    mask_ratio: float = 0.45
    mixing: str = "agnostic"
    order: tuple = ()
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-4
    batch_size: int = 32
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    train_fraction: float = 1.0
    modes: tuple = ("linear", "full")

    def to_dict(self) -> dict:
        plain = asdict(self)
        for key, value in plain.items():
            if isinstance(value, tuple):
                plain[key] = list(value)
        return plain


@dataclass
class DomainOutcome:
    domain: str
    mse: float  # tokenizer reconstruction on the test split
    coverage: float
    linear: EvalReport | None = None
    full: EvalReport | None = None


@dataclass
class PipelineResult:
    run_id: str
    plan: PipelinePlan
    tokenizers: dict  # domain -> (params, TokenizerConfig)
    checkpoint: EncoderCheckpoint  # pre-trained weights (not fine-tuned)
    pretrain_trace: list
    outcomes: dict  # domain -> DomainOutcome


def _tokenizer_config(plan: PipelinePlan, meta) -> TokenizerConfig:
    overrides = dict(codebook_size=plan.codebook_size,
                     epochs=plan.tokenizer_epochs,
                     batch_size=plan.batch_size,
                     reset_dead_codes=plan.reset_dead_codes)
    if plan.patch_size is not None:
        overrides["patch_size"] = plan.patch_size
    return TokenizerConfig.for_meta(meta, **overrides)


def run_pipeline(plan: PipelinePlan, run_id: str = "run", metrics_stream=None,
                 clock: RunClock | None = None, progress=None) -> PipelineResult:
    """Execute one full pipeline; stream metrics if a sink is given."""
    clock = clock or RunClock()

    def emit(stage, epoch, split, **values):
        if metrics_stream is not None:
            emit_metrics(metrics_record(run_id, stage, epoch, split,
                                        wall_seconds=clock.elapsed(), **values),
                         metrics_stream)

    def note(message):
        if progress is not None:
            progress(message)

    corpus = synth_corpus(plan.seed, plan.train_size, plan.test_size,
                          domains=plan.domains)

    tokenizers = {}
    outcomes = {}
    train_splits = {}
    test_splits = {}
    for name in plan.domains:
        train_set, test_set = corpus[name]
        config = _tokenizer_config(plan, train_set.meta)
        note(f"tokenizer {name}")

        def tick(row, stage=f"tokenizer/{name}"):
            emit(stage, row.epoch, "train", loss=row.loss, mse=row.mse,
                 coverage=row.coverage)

        params, _ = train_tokenizer(train_set, config, seed=plan.seed,
                                    progress=tick)
        quality = tokenizer_metrics(test_set, params, config)
        emit(f"tokenizer/{name}", plan.tokenizer_epochs, "test",
             mse=quality.mse, coverage=quality.coverage)
        tokenizers[name] = (params, config)
        outcomes[name] = DomainOutcome(domain=name, mse=quality.mse,
                                       coverage=quality.coverage)
        train_splits[name] = tokenized_split(train_set, params, config)
        test_splits[name] = tokenized_split(test_set, params, config)

    space = build_token_space(
        [(name, tokenizers[name][1].codebook_size) for name in plan.domains])
    pre_config = PretrainConfig(ratio=plan.mask_ratio, lr=plan.pretrain_lr,
                                batch_size=plan.batch_size,
                                epochs=plan.pretrain_epochs,
                                mixing=plan.mixing, order=plan.order,
                                seed=plan.seed)
    note("pretrain")
    corpora = {name: train_splits[name].tokens for name in plan.domains}

    def pre_tick(row):
        emit("pretrain", row["epoch"], "train", loss=row["loss"],
             masked_acc=row["masked_acc"])

    checkpoint, pretrain_trace = run_pretraining(corpora, space, pre_config,
                                                 progress=pre_tick)

    ft_config = FinetuneConfig(lr=plan.finetune_lr, batch_size=plan.batch_size,
                               epochs=plan.finetune_epochs, seed=plan.seed,
                               train_fraction=plan.train_fraction)
    for name in plan.domains:
        train_split, test_split = train_splits[name], test_splits[name]
        if "linear" in plan.modes:
            note(f"linear {name}")
            report = run_linear_eval(checkpoint, train_split, test_split,
                                     ft_config)
            _emit_eval(emit, f"linear/{name}", report)
            outcomes[name].linear = report
        if "full" in plan.modes:
            note(f"full {name}")
            # fine-tuning mutates its checkpoint; keep the pre-trained one
            report = run_full_finetune(checkpoint.clone(), train_split,
                                       test_split, ft_config)
            _emit_eval(emit, f"full/{name}", report)
            outcomes[name].full = report

    return PipelineResult(run_id=run_id, plan=plan, tokenizers=tokenizers,
                          checkpoint=checkpoint, pretrain_trace=pretrain_trace,
                          outcomes=outcomes)


def _emit_eval(emit, stage: str, report: EvalReport):
    for row in report.trace:
        emit(stage, row["epoch"], "train", loss=row["loss"])
    emit(stage, len(report.trace), "test", loss=report.loss,
         accuracy=report.accuracy, macro_f1=report.macro_f1)


# ---------------------------------------------------------------------------
# sweeps


SWEEP_AXES = ("mask_ratio", "codebook_size", "patch_size", "mixing")

DEFAULT_SWEEP_VALUES = {
    "mask_ratio": (0.15, 0.30, 0.45, 0.60),
    "codebook_size": (128, 256, 512),
    "patch_size": (4, 10, 20),
    "mixing": ("agnostic", "sequential:motion-waves-beats",
               "sequential:beats-waves-motion"),
}


def apply_axis(plan: PipelinePlan, axis: str, value) -> PipelinePlan:
    """The swept value overrides exactly one logical setting of the plan."""
    if axis == "mask_ratio":
        return replace(plan, mask_ratio=float(value))
    if axis == "codebook_size":
        return replace(plan, codebook_size=int(value))
    if axis == "patch_size":
        return replace(plan, patch_size=int(value))
    if axis == "mixing":
        text = str(value)
        if text == "agnostic":
            return replace(plan, mixing="agnostic", order=())
        if text.startswith("sequential:"):
            order = tuple(part for part in text.split(":", 1)[1].split("-") if part)
            return replace(plan, mixing="sequential", order=order)
        raise ValueError(f"bad mixing value {value!r}; expected 'agnostic' "
                         "or 'sequential:a-b-c'")
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _sweep_row(axis: str, value, result: PipelineResult) -> dict:
    row = {"axis": axis, "value": value}
    for name in result.plan.domains:
        outcome = result.outcomes[name]
        row[f"{name}.mse"] = outcome.mse
        row[f"{name}.coverage"] = outcome.coverage
        if outcome.linear is not None:
            row[f"{name}.linear.accuracy"] = outcome.linear.accuracy
            row[f"{name}.linear.macro_f1"] = outcome.linear.macro_f1
        if outcome.full is not None:
            row[f"{name}.full.accuracy"] = outcome.full.accuracy
            row[f"{name}.full.macro_f1"] = outcome.full.macro_f1
    return row


def _sweep_trial(payload):
    """One independent sweep run; top-level so worker processes can import it."""
    axis, value, base_plan, trial_dir, fixed = payload
    os.makedirs(trial_dir, exist_ok=True)
    plan = apply_axis(base_plan, axis, value)
    with open(os.path.join(trial_dir, "metrics.jsonl"), "w",
              encoding="utf-8") as stream:
        result = run_pipeline(plan, run_id=f"{axis}={value}",
                              metrics_stream=stream, clock=RunClock(fixed))
    return _sweep_row(axis, value, result)


def run_sweep(axis: str, values, base_plan: PipelinePlan, csv_path: str,
              jsonl_path: str, metrics_stream=None, clock: RunClock | None = None,
              progress=None, workers: int = 1, trial_root: str | None = None) -> list:
    """One pipeline per value; final metrics tabulated as CSV + JSONL.

    Every run shares the base plan (seed included) except the swept axis.
    Serial by default; with workers > 1 the values run as independent
    processes, each streaming metrics into its own directory under
    trial_root instead of the shared metrics_stream.  Returns the table
    rows; each JSONL row embeds the resolved plan.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")

    if workers > 1:
        if trial_root is None:
            raise ValueError("parallel sweeps need a trial_root directory")
        payloads = [(axis, value, base_plan,
                     os.path.join(trial_root, f"{axis}={value}"),
                     clock.fixed if clock else False) for value in values]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_trial, payloads))
    else:
        rows = []
        for value in values:
            plan = apply_axis(base_plan, axis, value)
            run_id = f"{axis}={value}"
            if progress is not None:
                progress(run_id)
            result = run_pipeline(plan, run_id=run_id,
                                  metrics_stream=metrics_stream, clock=clock)
            rows.append(_sweep_row(axis, value, result))

    with open(jsonl_path, "w", encoding="utf-8") as jsonl:
        for value, row in zip(values, rows):
            plan = apply_axis(base_plan, axis, value)
            jsonl.write(json.dumps({**row, "config": plan.to_dict()}) + "\n")

    header = list(rows[0].keys())
    with open(csv_path, "w", encoding="utf-8", newline="") as sink:
        writer = csv.DictWriter(sink, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# artifact export


EXPORT_KINDS = ("embeddings", "attention", "tokens")


def write_tokens_csv(tokens: np.ndarray, out_path: str,
                     run_id: str = "export") -> str:
    """Long-format token CSV: one row per (instance, position)."""
    tokens = np.asarray(tokens)
    with open(out_path, "w", encoding="utf-8", newline="") as sink:
        writer = csv.writer(sink)
        writer.writerow(["run_id", "instance", "position", "token_id"])
        for i in range(tokens.shape[0]):
            for p in range(tokens.shape[1]):
                writer.writerow([run_id, i, p, int(tokens[i, p])])
    return out_path


def _export_rows(checkpoint: EncoderCheckpoint, domain: str,
                 tokens: np.ndarray) -> np.ndarray:
    """[N, L+1] embedding-table rows: word-mapped CLS + global token ids."""
    space, mapping = checkpoint.space, checkpoint.mapping
    gids = space.to_global(domain, tokens)
    cls_col = np.full((gids.shape[0], 1), space.cls_id, dtype=np.int64)
    return mapping.table[np.concatenate([cls_col, gids], axis=1)]


def export_artifacts(what: str, checkpoint: EncoderCheckpoint,
                     dataset: DomainDataset, tokenizer, out_path: str,
                     run_id: str = "export", instance: int = 0,
                     limit: int | None = None) -> str:
    """Serialize artifacts for external analysis; returns out_path.

    embeddings: CSV, one row per sequence position (CLS included) holding the
    final-layer vector; token_id is the global id, -1 for CLS.  attention:
    one archive of eval-mode attention maps for a single instance, one [S, S]
    tensor per layer and head.  tokens: CSV of the token stream, one row per
    (instance, position).
    """
    if what not in EXPORT_KINDS:
        raise ValueError(f"unknown export {what!r}; expected one of {EXPORT_KINDS}")
    params, config = tokenizer
    if dataset.meta.name not in checkpoint.space.domains:
        raise ValueError(
            f"checkpoint token space has no domain {dataset.meta.name!r} "
            f"(knows {list(checkpoint.space.domains)})")

    tokens = tokenize_dataset(dataset, params, config)
    if limit is not None:
        tokens = tokens[:limit]

    if what == "tokens":
        return write_tokens_csv(tokens, out_path, run_id)

    rows = _export_rows(checkpoint, dataset.meta.name, tokens)
    space = checkpoint.space

    if what == "embeddings":
        gids = space.to_global(dataset.meta.name, tokens)
        width = checkpoint.config.d_model
        with open(out_path, "w", encoding="utf-8", newline="") as sink:
            writer = csv.writer(sink)
            writer.writerow(["run_id", "instance", "position", "token_id"]
                            + [f"e{j}" for j in range(width)])
            for start in range(0, rows.shape[0], 32):
                chunk = rows[start : start + 32]
                vectors = encoder_forward(checkpoint.params, checkpoint.config,
                                          chunk).data
                for b in range(chunk.shape[0]):
                    i = start + b
                    for p in range(chunk.shape[1]):
                        token = -1 if p == 0 else int(gids[i, p - 1])
                        writer.writerow([run_id, i, p, token]
                                        + [f"{v:.6e}" for v in vectors[b, p]])
        return out_path

    # attention over one instance
    if not 0 <= instance < tokens.shape[0]:
        raise ValueError(f"instance {instance} outside [0, {tokens.shape[0]})")
    maps = attention_maps(checkpoint.params, checkpoint.config,
                          rows[instance : instance + 1])
    named = {}
    for layer in range(maps.shape[0]):
        for head in range(maps.shape[2]):
            named[f"attention.layer{layer}.head{head}"] = \
                maps[layer, 0, head].astype(np.float32)
    manifest = {
        "kind": "attention",
        "run_id": run_id,
        "domain": dataset.meta.name,
        "instance": instance,
        "layers": maps.shape[0],
        "heads": maps.shape[2],
        "sequence": maps.shape[3],
    }
    save_nta(out_path, named, manifest)
    return out_path
