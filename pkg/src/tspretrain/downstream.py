"""Task adaptation and classification metrics.

Two adaptation modes over a pre-trained encoder checkpoint: linear
evaluation (encoder frozen, a fresh linear head trained on cached CLS
features) and full fine-tuning (head plus every encoder parameter).
Multiclass heads train with softmax cross-entropy; multilabel heads with
per-class sigmoid BCE thresholded at 0.5.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tt
from .data import TASK_MULTICLASS, TASK_MULTILABEL, DomainDataset
from .optim import Adam
from .pretrain import EncoderCheckpoint
from .rng import SeededRng
from .tensor import Tensor
from .tokenizer import TokenizerConfig, tokenize_dataset
from .transformer import encoder_forward


@dataclass(frozen=True)
class TokenizedSplit:
    """One split of one domain after tokenization."""

    domain: str
    tokens: np.ndarray  # [N, L] local token ids
    labels: np.ndarray  # [N] ints or [N, num_classes] bits
    task: str
    num_classes: int

    def __len__(self):
        return self.tokens.shape[0]


def tokenized_split(dataset: DomainDataset, params: dict, config: TokenizerConfig) -> TokenizedSplit:
    return TokenizedSplit(
        domain=dataset.meta.name,
        tokens=tokenize_dataset(dataset, params, config),
        labels=dataset.labels_array(),
        task=dataset.meta.task,
        num_classes=dataset.meta.num_classes,
    )


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-4  # matches the pre-training defaults
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    train_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(f"train_fraction {self.train_fraction} outside (0, 1]")


@dataclass
class EvalReport:
    mode: str  # "linear" | "full"
    accuracy: float
    macro_f1: float
    loss: float
    per_class: tuple  # one {precision, recall, f1} dict per class
    hamming_accuracy: float | None = None  # multilabel only
    trace: list = field(default_factory=list)  # per-epoch training rows

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# metrics


def _per_class_stats(true_pos, false_pos, false_neg):
    precision = true_pos / (true_pos + false_pos) if true_pos + false_pos else 0.0
    recall = true_pos / (true_pos + false_neg) if true_pos + false_neg else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def compute_classification_metrics(predictions: np.ndarray, labels: np.ndarray,
                                   task: str, num_classes: int) -> dict:
    """Accuracy + macro-F1 (+ Hamming accuracy for multilabel).

    Multiclass: predictions and labels are [N] class ids; accuracy is the
    exact-match fraction.  Multilabel: [N, num_classes] binary matrices;
    accuracy is subset accuracy (whole bit-vector must match) and
    hamming_accuracy is the per-bit match rate.  Macro-F1 averages per-class
    F1 with absent classes contributing 0.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if task == TASK_MULTICLASS:
        accuracy = float((predictions == labels).mean()) if labels.size else 0.0
        per_class = []
        for c in range(num_classes):
            tp = int(((predictions == c) & (labels == c)).sum())
            fp = int(((predictions == c) & (labels != c)).sum())
            fn = int(((predictions != c) & (labels == c)).sum())
            per_class.append(_per_class_stats(tp, fp, fn))
        return {
            "accuracy": accuracy,
            "macro_f1": float(np.mean([s["f1"] for s in per_class])),
            "per_class": tuple(per_class),
            "hamming_accuracy": None,
        }
    if task == TASK_MULTILABEL:
        if predictions.ndim != 2 or predictions.shape[1] != num_classes:
            raise ValueError(f"expected [N, {num_classes}] bit matrix, "
                             f"got {predictions.shape}")
        accuracy = float((predictions == labels).all(axis=1).mean()) if labels.size else 0.0
        per_class = []
        for c in range(num_classes):
            tp = int(((predictions[:, c] == 1) & (labels[:, c] == 1)).sum())
            fp = int(((predictions[:, c] == 1) & (labels[:, c] == 0)).sum())
            fn = int(((predictions[:, c] == 0) & (labels[:, c] == 1)).sum())
            per_class.append(_per_class_stats(tp, fp, fn))
        return {
            "accuracy": accuracy,
            "macro_f1": float(np.mean([s["f1"] for s in per_class])),
            "per_class": tuple(per_class),
            "hamming_accuracy": float((predictions == labels).mean()),
        }
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# model assembly


def attach_head(checkpoint: EncoderCheckpoint, task: str, num_classes: int,
                rng: SeededRng) -> dict:
    """Fresh linear head over the CLS representation."""
    if task not in (TASK_MULTICLASS, TASK_MULTILABEL):
        raise ValueError(f"unknown task {task!r}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    return {
        "head.task": tt.init_dense(rng, checkpoint.config.d_model, num_classes),
        "head.task.bias": tt.zeros_param((num_classes,)),
    }


def _check_domain(checkpoint: EncoderCheckpoint, split: TokenizedSplit):
    if split.domain not in checkpoint.space.domains:
        raise ValueError(
            f"checkpoint token space has no domain {split.domain!r} "
            f"(knows {list(checkpoint.space.domains)})")


def _encoder_rows(checkpoint: EncoderCheckpoint, split: TokenizedSplit) -> np.ndarray:
    """[N, L+1] word-mapped row ids, CLS first."""
    space, mapping = checkpoint.space, checkpoint.mapping
    gids = space.to_global(split.domain, split.tokens)
    cls_col = np.full((gids.shape[0], 1), space.cls_id, dtype=np.int64)
    return mapping.table[np.concatenate([cls_col, gids], axis=1)]


def _cls_features(checkpoint: EncoderCheckpoint, rows: np.ndarray,
                  batch_size: int = 64) -> np.ndarray:
    """Eval-mode CLS vectors, [N, d_model]."""
    out = np.empty((rows.shape[0], checkpoint.config.d_model), dtype=np.float32)
    for start in range(0, rows.shape[0], batch_size):
        chunk = rows[start : start + batch_size]
        features = encoder_forward(checkpoint.params, checkpoint.config, chunk)
        out[start : start + chunk.shape[0]] = features.data[:, 0, :]
    return out


def _head_loss(head: dict, features: Tensor, labels: np.ndarray, task: str) -> Tensor:
    logits = features @ head["head.task"] + head["head.task.bias"]
    if task == TASK_MULTICLASS:
        return tt.softmax_cross_entropy(logits, labels, reduction="mean")
    return tt.reduce_mean(tt.bce_with_logits(logits, labels.astype(np.float32)))


def _predict_from_logits(logits: np.ndarray, task: str) -> np.ndarray:
    if task == TASK_MULTICLASS:
        return np.argmax(logits, axis=1)
    return (logits >= 0.0).astype(np.int64)  # sigmoid(x) >= 0.5 iff x >= 0


def subsample_split(split: TokenizedSplit, fraction: float, seed: int) -> TokenizedSplit:
    """Deterministic stratified subsample of a tokenized split.

    Multiclass strata are the classes (each keeps at least one instance);
    multilabel draws a plain seeded uniform subsample.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    if fraction == 1.0:
        return split
    rng = SeededRng(seed)
    if split.task == TASK_MULTICLASS:
        keep = []
        for c in range(split.num_classes):
            members = np.nonzero(split.labels == c)[0]
            if members.size == 0:
                continue
            count = max(1, int(np.floor(fraction * members.size + 0.5)))
            order = rng.child(c).permutation(members.size)[:count]
            keep.extend(members[order].tolist())
    else:
        total = len(split)
        count = max(1, int(np.floor(fraction * total + 0.5)))
        keep = rng.permutation(total)[:count].tolist()
    keep = np.array(sorted(keep))
    return TokenizedSplit(domain=split.domain, tokens=split.tokens[keep],
                          labels=split.labels[keep], task=split.task,
                          num_classes=split.num_classes)


# ---------------------------------------------------------------------------
# linear evaluation


def run_linear_eval(checkpoint: EncoderCheckpoint, train: TokenizedSplit,
                    test: TokenizedSplit, config: FinetuneConfig,
                    progress=None) -> EvalReport:
    """Train only a linear head; the encoder is frozen throughout.

    Encoder parameters are exactly as in the checkpoint before and after —
    the head trains against cached CLS features.
    """
    _check_domain(checkpoint, train)
    _check_domain(checkpoint, test)
    train = subsample_split(train, config.train_fraction, config.seed)
    root = SeededRng(config.seed)
    head = attach_head(checkpoint, train.task, train.num_classes, root.child(0))

    train_features = _cls_features(checkpoint, _encoder_rows(checkpoint, train))
    test_features = _cls_features(checkpoint, _encoder_rows(checkpoint, test))

    optimizer = Adam(head, lr=config.lr)
    trace = []
    count = len(train)
    for epoch in range(config.epochs):
        order = root.child(1).child(epoch).permutation(count)
        loss_sum = 0.0
        for start in range(0, count, config.batch_size):
            pick = order[start : start + config.batch_size]
            optimizer.zero_grad()
            loss = _head_loss(head, Tensor(train_features[pick]),
                              train.labels[pick], train.task)
            tt.autodiff_backward(loss, leaves=list(head.values()))
            optimizer.step()
            loss_sum += float(loss.data) * pick.size
        row = {"epoch": epoch, "loss": loss_sum / count}
        trace.append(row)
        if progress is not None:
            progress(row)

    return _final_report("linear", head, Tensor(test_features), test, trace)


def _final_report(mode: str, head: dict, test_features: Tensor,
                  test: TokenizedSplit, trace: list) -> EvalReport:
    logits = (test_features @ head["head.task"] + head["head.task.bias"]).data
    predictions = _predict_from_logits(logits, test.task)
    loss = float(_head_loss(head, test_features.detach(), test.labels, test.task).data)
    metrics = compute_classification_metrics(predictions, test.labels,
                                             test.task, test.num_classes)
    return EvalReport(mode=mode, accuracy=metrics["accuracy"],
                      macro_f1=metrics["macro_f1"], loss=loss,
                      per_class=metrics["per_class"],
                      hamming_accuracy=metrics["hamming_accuracy"], trace=trace)


# ---------------------------------------------------------------------------
# full fine-tuning


def run_full_finetune(checkpoint: EncoderCheckpoint, train: TokenizedSplit,
                      test: TokenizedSplit, config: FinetuneConfig,
                      progress=None) -> EvalReport:
    """Adjust the entire model: every encoder parameter plus a fresh head.

    Training updates the checkpoint's tensors in place, so the caller's
    checkpoint holds the tuned encoder afterwards; reload from disk to get
    the pre-trained weights back.
    """
    _check_domain(checkpoint, train)
    _check_domain(checkpoint, test)
    train = subsample_split(train, config.train_fraction, config.seed)
    root = SeededRng(config.seed)
    head = attach_head(checkpoint, train.task, train.num_classes, root.child(0))

    trainable = dict(checkpoint.params)
    trainable.update(head)
    optimizer = Adam(trainable, lr=config.lr)

    rows = _encoder_rows(checkpoint, train)
    test_rows = _encoder_rows(checkpoint, test)
    count = len(train)
    trace = []
    for epoch in range(config.epochs):
        epoch_rng = root.child(1).child(epoch)
        order = epoch_rng.child(0).permutation(count)
        drop_rng = epoch_rng.child(1)
        loss_sum = 0.0
        for start in range(0, count, config.batch_size):
            pick = order[start : start + config.batch_size]
            optimizer.zero_grad()
            features = encoder_forward(checkpoint.params, checkpoint.config,
                                       rows[pick], rng=drop_rng, train=True)
            cls = tt.take_positions(features, np.arange(pick.size),
                                    np.zeros(pick.size, dtype=np.int64))
            loss = _head_loss(head, cls, train.labels[pick], train.task)
            tt.autodiff_backward(loss, leaves=list(trainable.values()))
            optimizer.step()
            loss_sum += float(loss.data) * pick.size
        row = {"epoch": epoch, "loss": loss_sum / count}
        trace.append(row)
        if progress is not None:
            progress(row)

    test_features = _cls_features(checkpoint, test_rows)
    return _final_report("full", head, Tensor(test_features), test, trace)
