"""Cross-domain masked token prediction.

Per-domain token streams are lifted into one global id space (contiguous
per-domain offsets, then MASK/CLS/PAD specials), pushed through a seeded
injective word mapping into the embedding vocabulary, and used to pre-train
the bidirectional encoder: mask a fraction of each sequence, predict the
original ids at the masked positions, mean cross-entropy.

Domain mixing is either "agnostic" (all sequences from all domains shuffled
together every epoch) or "sequential" (domains consumed in a fixed order,
shuffling only within each domain).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import (
    EmptyMask,
    HeaderInconsistent,
    MissingTensor,
    ShapeMismatch,
    VocabularyTooSmall,
)
from .nta import load_nta, save_nta
from .optim import Adam
from .rng import SeededRng
from .tensor import Tensor
from .transformer import (
    EncoderConfig,
    encoder_forward,
    encoder_param_names,
    init_encoder,
    mtp_logits,
    parameter_shapes,
)

# ---------------------------------------------------------------------------
# global token space


@dataclass(frozen=True)
class DomainRange:
    name: str
    offset: int
    size: int


@dataclass(frozen=True)
class GlobalTokenSpace:
    """Disjoint contiguous per-domain id ranges plus trailing special ids."""

    ranges: tuple

    @property
    def total(self) -> int:
        return sum(r.size for r in self.ranges)

    @property
    def mask_id(self) -> int:
        return self.total

    @property
    def cls_id(self) -> int:
        return self.total + 1

    @property
    def pad_id(self) -> int:
        return self.total + 2

    @property
    def num_ids(self) -> int:
        """Vocabulary plus the three specials."""
        return self.total + 3

    @property
    def domains(self) -> tuple:
        return tuple(r.name for r in self.ranges)

    def range_for(self, domain: str) -> DomainRange:
        for r in self.ranges:
            if r.name == domain:
                return r
        raise KeyError(f"unknown domain {domain!r}")

    def to_global(self, domain: str, local_ids: np.ndarray) -> np.ndarray:
        r = self.range_for(domain)
        ids = np.asarray(local_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= r.size):
            raise ValueError(f"local id out of range [0, {r.size}) for {domain!r}")
        return (ids + r.offset).astype(np.int64)

    def to_local(self, global_id: int):
        """Global id -> (domain, local id)."""
        for r in self.ranges:
            if r.offset <= global_id < r.offset + r.size:
                return r.name, int(global_id) - r.offset
        raise ValueError(f"global id {global_id} outside every domain range")

    def to_manifest(self) -> dict:
        entries = {"space.count": len(self.ranges)}
        for i, r in enumerate(self.ranges):
            entries[f"space.{i}.domain"] = r.name
            entries[f"space.{i}.offset"] = r.offset
            entries[f"space.{i}.size"] = r.size
        return entries

    @classmethod
    def from_manifest(cls, manifest: dict) -> "GlobalTokenSpace":
        count = int(manifest["space.count"])
        ranges = []
        expected_offset = 0
        for i in range(count):
            r = DomainRange(
                name=manifest[f"space.{i}.domain"],
                offset=int(manifest[f"space.{i}.offset"]),
                size=int(manifest[f"space.{i}.size"]),
            )
            if r.offset != expected_offset:
                raise HeaderInconsistent(
                    f"token space offsets not contiguous at {r.name!r}")
            expected_offset += r.size
            ranges.append(r)
        return cls(ranges=tuple(ranges))


def build_token_space(tokenizers) -> GlobalTokenSpace:
    """(domain name, codebook size) pairs -> contiguous global id layout."""
    pairs = list(tokenizers)
    if not pairs:
        raise ValueError("need at least one tokenizer")
    names = [name for name, _ in pairs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate domain names in {names}")
    ranges = []
    offset = 0
    for name, size in pairs:
        if size < 1:
            raise ValueError(f"domain {name!r} has empty codebook")
        ranges.append(DomainRange(name=name, offset=offset, size=int(size)))
        offset += int(size)
    return GlobalTokenSpace(ranges=tuple(ranges))


# ---------------------------------------------------------------------------
# word mapping


@dataclass(frozen=True)
class WordMapping:
    """Injective map from the global id space into the embedding vocabulary."""

    table: np.ndarray  # [num_ids] int64, distinct values in [0, v_ext)
    v_ext: int
    seed: int

    def rows(self, ids: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(ids)]


def word_map(space: GlobalTokenSpace, v_ext: int, seed: int) -> WordMapping:
    """Assign every global id (specials included) a distinct external word id."""
    needed = space.num_ids
    if v_ext < needed:
        raise VocabularyTooSmall(
            f"external vocabulary {v_ext} cannot hold {needed} distinct ids")
    table = SeededRng(seed).permutation(v_ext)[:needed].astype(np.int64)
    return WordMapping(table=table, v_ext=int(v_ext), seed=int(seed))


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple  # sorted, distinct, all in [0, L)
    ratio: float


def mask_plan(length: int, ratio: float, rng: SeededRng) -> MaskPlan:
    """Uniform sample of max(1, round(ratio * length)) distinct positions.

    Rounding is half-up, so e.g. length 64 at ratio 0.45 always masks 29.
    """
    if length < 1:
        raise ValueError("cannot plan masking for an empty sequence")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    if ratio == 0.0:
        return MaskPlan(positions=(), ratio=0.0)
    count = min(length, max(1, int(np.floor(ratio * length + 0.5))))
    chosen = rng.choice_no_replace(length, count)
    return MaskPlan(positions=tuple(sorted(int(p) for p in chosen)), ratio=float(ratio))


def corrupt(tokens: np.ndarray, plan: MaskPlan, mask_id: int) -> np.ndarray:
    """Replace the planned positions with the MASK id; nothing else changes."""
    out = np.asarray(tokens).copy()
    if plan.positions:
        positions = np.asarray(plan.positions)
        if positions.min() < 0 or positions.max() >= out.shape[-1]:
            raise ValueError(
                f"mask position out of range for length {out.shape[-1]}")
        out[..., positions] = mask_id
    return out


def mtp_loss(logits, targets) -> Tensor:
    """Mean cross-entropy of masked-position logits against original ids."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise EmptyMask("no masked positions to score")
    return tt.softmax_cross_entropy(logits, targets, reduction="mean")


# ---------------------------------------------------------------------------
# pre-training

MIXING_MODES = ("agnostic", "sequential")


@dataclass(frozen=True)
class PretrainConfig:
    ratio: float = 0.45
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    mixing: str = "agnostic"
    order: tuple = ()  # sequential consumption order; () = corpus order
    v_ext: int = 0  # 0 = exactly the global space (permutation mapping)
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    ffn: int = 256
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"mask ratio {self.ratio} outside [0, 1]")
        if self.mixing not in MIXING_MODES:
            raise ValueError(
                f"unknown mixing mode {self.mixing!r}; expected one of {MIXING_MODES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_manifest(self) -> dict:
        return {
            "pretrain.ratio": self.ratio,
            "pretrain.lr": self.lr,
            "pretrain.batch_size": self.batch_size,
            "pretrain.epochs": self.epochs,
            "pretrain.mixing": self.mixing,
            "pretrain.order": ",".join(self.order),
            "pretrain.seed": self.seed,
        }


@dataclass
class EncoderCheckpoint:
    params: dict  # name -> Tensor
    config: EncoderConfig
    space: GlobalTokenSpace
    mapping: WordMapping
    manifest: dict = field(default_factory=dict)  # extra provenance keys

    def clone(self) -> "EncoderCheckpoint":
        """Deep-copied parameters; full fine-tuning mutates them in place."""
        params = {name: Tensor(p.data.copy()) for name, p in self.params.items()}
        return EncoderCheckpoint(params=params, config=self.config,
                                 space=self.space, mapping=self.mapping,
                                 manifest=dict(self.manifest))


def init_checkpoint(space: GlobalTokenSpace, max_len: int, config: PretrainConfig) -> EncoderCheckpoint:
    """Fresh encoder + word mapping for the given token space."""
    v_ext = config.v_ext if config.v_ext else space.num_ids
    mapping = word_map(space, v_ext, seed=config.seed)
    enc_config = EncoderConfig(
        vocab_rows=v_ext, logit_classes=space.total, max_len=max_len,
        layers=config.layers, d_model=config.d_model, heads=config.heads,
        ffn=config.ffn, dropout=config.dropout)
    params = init_encoder(enc_config, SeededRng(config.seed).child(0))
    return EncoderCheckpoint(params=params, config=enc_config, space=space,
                             mapping=mapping, manifest=dict(config.to_manifest()))


def _epoch_schedule(corpora: dict, order, mode: str, rng: SeededRng) -> list:
    """Deterministic (domain, instance index) visit order for one epoch."""
    if mode == "agnostic":
        refs = [(d, i) for d in corpora for i in range(len(corpora[d]))]
        return rng.shuffle_list(refs)
    schedule = []
    for pos, domain in enumerate(order):
        indices = rng.child(pos).permutation(len(corpora[domain]))
        schedule.extend((domain, int(i)) for i in indices)
    return schedule


def _assemble_batch(refs, corpora, space, mapping, ratio, mask_rng):
    """Corrupt, word-map, CLS-prefix and PAD a batch of token sequences.

    Returns (rows [B, S], lengths [B], flat feature indices of masked slots,
    their original global-id targets).
    """
    globals_ = [space.to_global(domain, corpora[domain][index])
                for domain, index in refs]
    seq = 1 + max(g.shape[0] for g in globals_)
    batch = len(refs)
    rows = np.full((batch, seq), mapping.table[space.pad_id], dtype=np.int64)
    lengths = np.empty(batch, dtype=np.int64)
    flat_slots = []
    targets = []
    for b, gids in enumerate(globals_):
        plan = mask_plan(gids.shape[0], ratio, mask_rng) if ratio > 0 else MaskPlan((), 0.0)
        corrupted = corrupt(gids, plan, space.mask_id)
        rows[b, 0] = mapping.table[space.cls_id]
        rows[b, 1 : 1 + corrupted.shape[0]] = mapping.table[corrupted]
        lengths[b] = corrupted.shape[0] + 1
        for p in plan.positions:
            flat_slots.append(b * seq + 1 + p)  # +1 skips the CLS slot
            targets.append(int(gids[p]))
    return rows, lengths, np.asarray(flat_slots, np.int64), np.asarray(targets, np.int64)


def run_pretraining(corpora: dict, space: GlobalTokenSpace, config: PretrainConfig,
                    trace_path: str | None = None, progress=None):
    """Train the encoder on masked token prediction over the given corpora.

    corpora maps domain name -> [N, L] integer array of local token ids.
    Returns (EncoderCheckpoint, trace) where trace rows are dicts with keys
    epoch, loss, masked_acc; rows are also streamed to trace_path as JSONL
    when given.
    """
    if not corpora:
        raise ValueError("no corpora to pre-train on")
    unknown = set(corpora) - set(space.domains)
    if unknown:
        raise ValueError(f"corpora domains {sorted(unknown)} missing from token space")
    order = tuple(config.order) if config.order else tuple(corpora)
    if config.mixing == "sequential":
        if sorted(order) != sorted(corpora):
            raise ValueError(
                f"sequential order {order} does not cover corpora {tuple(corpora)}")

    max_len = 1 + max(arr.shape[1] for arr in corpora.values())
    checkpoint = init_checkpoint(space, max_len, config)
    params = checkpoint.params
    optimizer = Adam(params, lr=config.lr)
    root = SeededRng(config.seed)

    trace = []
    sink = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        for epoch in range(config.epochs):
            epoch_rng = root.child(1).child(epoch)
            schedule = _epoch_schedule(corpora, order, config.mixing, epoch_rng.child(0))
            mask_rng = epoch_rng.child(1)
            drop_rng = epoch_rng.child(2)
            loss_sum = 0.0
            hit_sum = 0
            masked_total = 0
            for start in range(0, len(schedule), config.batch_size):
                refs = schedule[start : start + config.batch_size]
                rows, lengths, slots, targets = _assemble_batch(
                    refs, corpora, space, checkpoint.mapping, config.ratio, mask_rng)
                if slots.size == 0:  # ratio 0: nothing to predict
                    continue
                optimizer.zero_grad()
                features = encoder_forward(params, checkpoint.config, rows, lengths,
                                           rng=drop_rng, train=True)
                flat = tt.reshape(features, (rows.shape[0] * rows.shape[1],
                                             checkpoint.config.d_model))
                logits = mtp_logits(params, tt.take_rows(flat, slots))
                loss = mtp_loss(logits, targets)
                tt.autodiff_backward(loss, leaves=list(params.values()))
                optimizer.step()
                loss_sum += float(loss.data) * slots.size
                hit_sum += int((np.argmax(logits.data, axis=1) == targets).sum())
                masked_total += slots.size
            row = {
                "epoch": epoch,
                "loss": loss_sum / masked_total if masked_total else 0.0,
                "masked_acc": hit_sum / masked_total if masked_total else 0.0,
            }
            trace.append(row)
            if sink:
                sink.write(json.dumps(row, sort_keys=True) + "\n")
                sink.flush()
            if progress is not None:
                progress(row)
    finally:
        if sink:
            sink.close()
    return checkpoint, trace


def masked_eval(checkpoint: EncoderCheckpoint, corpora: dict, ratio: float,
                seed: int = 0, batch_size: int = 32) -> dict:
    """Masked-prediction quality without parameter updates.

    Masks each sequence once with a seeded plan, runs the encoder in eval
    mode, and scores the original ids: mean cross-entropy and top-1 accuracy
    over all masked positions.  The masking depends on (seed, batch_size),
    so report both alongside the numbers.
    """
    space, mapping = checkpoint.space, checkpoint.mapping
    unknown = set(corpora) - set(space.domains)
    if unknown:
        raise ValueError(f"corpora domains {sorted(unknown)} missing from token space")
    head = checkpoint.params["head.mtp"].data
    head_bias = checkpoint.params["head.mtp.bias"].data
    root = SeededRng(seed)
    loss_sum = 0.0
    hits = 0
    count = 0
    for index, domain in enumerate(sorted(corpora)):
        tokens = np.asarray(corpora[domain])
        mask_rng = root.child(index)
        for start in range(0, tokens.shape[0], batch_size):
            refs = [(domain, i)
                    for i in range(start, min(start + batch_size, tokens.shape[0]))]
            rows, lengths, slots, targets = _assemble_batch(
                refs, {domain: tokens}, space, mapping, ratio, mask_rng)
            if slots.size == 0:
                continue
            features = encoder_forward(checkpoint.params, checkpoint.config,
                                       rows, lengths)
            flat = features.data.reshape(-1, checkpoint.config.d_model)
            logits = (flat[slots] @ head + head_bias).astype(np.float64)
            logits -= logits.max(axis=1, keepdims=True)
            logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            loss_sum += float(-logp[np.arange(targets.size), targets].sum())
            hits += int((np.argmax(logits, axis=1) == targets).sum())
            count += targets.size
    if count == 0:
        raise EmptyMask("no positions were masked at this ratio")
    return {"loss": loss_sum / count, "masked_acc": hits / count, "masked": count}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(checkpoint: EncoderCheckpoint, path: str):
    manifest = {
        "kind": "encoder",
        "word_map": ",".join(str(v) for v in checkpoint.mapping.table),
        "word_map.seed": checkpoint.mapping.seed,
        "word_map.v_ext": checkpoint.mapping.v_ext,
    }
    manifest.update(checkpoint.config.to_manifest())
    manifest.update(checkpoint.space.to_manifest())
    manifest.update(checkpoint.manifest)
    save_nta(path, {name: p.data for name, p in checkpoint.params.items()}, manifest)


def load_checkpoint(path: str) -> EncoderCheckpoint:
    tensors, manifest = load_nta(path)
    if manifest.get("kind") != "encoder":
        raise HeaderInconsistent(f"{path}: not an encoder checkpoint")
    config = EncoderConfig.from_manifest(manifest)
    space = GlobalTokenSpace.from_manifest(manifest)
    table = np.array([int(v) for v in manifest["word_map"].split(",")], dtype=np.int64)
    mapping = WordMapping(table=table, v_ext=int(manifest["word_map.v_ext"]),
                          seed=int(manifest["word_map.seed"]))
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name not in tensors:
            raise MissingTensor(f"{path}: checkpoint lacks tensor {name!r}")
        arr = tensors[name]
        if arr.shape != shape:
            raise ShapeMismatch(name, shape, arr.shape)
        params[name] = Tensor(arr, requires_grad=True)
    extras = {k: v for k, v in manifest.items()
              if not k.startswith(("encoder.", "space.", "word_map"))
              and k != "kind"}
    return EncoderCheckpoint(params=params, config=config, space=space,
                             mapping=mapping, manifest=extras)


def load_external_weights(path: str, checkpoint: EncoderCheckpoint) -> EncoderCheckpoint:
    """Swap in encoder weights from a foreign named-tensor archive.

    The archive must provide every encoder tensor (the MTP head stays local).
    Embedding tables may be taller than needed — a larger foreign vocabulary
    or longer position table is sliced to this model's rows.
    """
    tensors, _ = load_nta(path)
    expected = parameter_shapes(checkpoint.config)
    params = dict(checkpoint.params)
    for name in encoder_param_names(checkpoint.config):
        if name not in tensors:
            raise MissingTensor(f"{path}: external archive lacks tensor {name!r}")
        arr = tensors[name]
        want = expected[name]
        if name in ("embedding.word", "embedding.position"):
            if arr.ndim != 2 or arr.shape[0] < want[0] or arr.shape[1] != want[1]:
                raise ShapeMismatch(name, want, arr.shape)
            arr = arr[: want[0]]
        elif arr.shape != want:
            raise ShapeMismatch(name, want, arr.shape)
        params[name] = Tensor(arr.copy(), requires_grad=True)
    manifest = dict(checkpoint.manifest)
    manifest["external_weights"] = os.path.basename(path)
    return EncoderCheckpoint(params=params, config=checkpoint.config,
                             space=checkpoint.space, mapping=checkpoint.mapping,
                             manifest=manifest)
