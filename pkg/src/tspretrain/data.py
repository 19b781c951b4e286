"""Datasets, on-disk formats, normalization, patching, and synthetic corpora.

A *domain* is a homogeneous collection of multivariate series: fixed channel
count C, length T, patch size P, and task type.  Domains live on disk as a
directory with a ``domain.meta`` text file plus ``train.tsb`` / ``test.tsb``
binary splits (TSB = time-series binary, format below).

TSB layout, all little-endian::

    "TSB1" | u32 version=1 | u32 count | u32 channels | u32 length
          | u8 task (0=multiclass, 1=multilabel) | u32 num_classes
    then per instance:
          multiclass: u32 label
          multilabel: num_classes x u8 (0/1)
          followed by channels*length float32, channel-major

The synthetic corpus provides three structurally different domains so the
cross-domain pipeline can be exercised end to end without external data.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import HeaderInconsistent, MagicMismatch, TruncatedFile
from .rng import SeededRng

TSB_MAGIC = b"TSB1"
TSB_VERSION = 1
TASK_MULTICLASS = "multiclass"
TASK_MULTILABEL = "multilabel"
_TASK_CODES = {TASK_MULTICLASS: 0, TASK_MULTILABEL: 1}
_TASK_NAMES = {v: k for k, v in _TASK_CODES.items()}
META_KEYS = ("name", "channels", "length", "patch_size", "task", "num_classes")


@dataclass(frozen=True)
class DomainMeta:
    name: str
    channels: int
    length: int
    patch_size: int
    task: str
    num_classes: int

    def __post_init__(self):
        if self.task not in _TASK_CODES:
            raise HeaderInconsistent(f"unknown task type: {self.task!r}")
        for key in ("channels", "length", "patch_size", "num_classes"):
            if getattr(self, key) < 1:
                raise HeaderInconsistent(f"{key} must be positive, got {getattr(self, key)}")
        if self.patch_size > self.length:
            raise HeaderInconsistent(f"patch_size {self.patch_size} exceeds length {self.length}")

    @property
    def num_patches(self) -> int:
        return self.length // self.patch_size


@dataclass
class TimeSeriesInstance:
    values: np.ndarray  # [channels, length] float32
    label: object  # int for multiclass, uint8 multi-hot vector for multilabel


@dataclass
class DomainDataset:
    meta: DomainMeta
    instances: list = field(default_factory=list)

    def __len__(self):
        return len(self.instances)

    def values_array(self) -> np.ndarray:
        return np.stack([inst.values for inst in self.instances])

    def labels_array(self) -> np.ndarray:
        if self.meta.task == TASK_MULTICLASS:
            return np.array([inst.label for inst in self.instances], dtype=np.int64)
        return np.stack([np.asarray(inst.label, dtype=np.uint8) for inst in self.instances])


@dataclass
class PatchSequence:
    """Non-overlapping patches of one instance: [num_patches, channels, patch]."""

    patches: np.ndarray


# ---------------------------------------------------------------------------
# normalization and patching


def znormalize(values: np.ndarray) -> np.ndarray:
    """Per-channel z-normalization over time (population std, 1e-8 floor)."""
    values = np.asarray(values, dtype=np.float32)
    mean = values.mean(axis=-1, keepdims=True)
    std = values.std(axis=-1, keepdims=True)
    return ((values - mean) / (std + np.float32(1e-8))).astype(np.float32)


def patchify(values: np.ndarray, patch_size: int) -> PatchSequence:
    """Split [C, T] into floor(T/P) non-overlapping patches, dropping the tail."""
    values = np.asarray(values)
    channels, length = values.shape
    if patch_size < 1:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    if patch_size > length:
        raise ValueError(f"patch_size {patch_size} exceeds series length {length}")
    count = length // patch_size
    trimmed = values[:, : count * patch_size]
    patches = trimmed.reshape(channels, count, patch_size).transpose(1, 0, 2)
    return PatchSequence(np.ascontiguousarray(patches))


# ---------------------------------------------------------------------------
# TSB binary split files


def _label_bytes(meta: DomainMeta, instance: TimeSeriesInstance) -> bytes:
    if meta.task == TASK_MULTICLASS:
        label = int(instance.label)
        if not 0 <= label < meta.num_classes:
            raise HeaderInconsistent(f"label {label} out of range [0, {meta.num_classes})")
        return struct.pack("<I", label)
    vec = np.asarray(instance.label, dtype=np.uint8)
    if vec.shape != (meta.num_classes,):
        raise HeaderInconsistent(f"multilabel vector shape {vec.shape} != ({meta.num_classes},)")
    if np.any(vec > 1):
        raise HeaderInconsistent("multilabel entries must be 0 or 1")
    return vec.tobytes()


def _atomic_write(path: str, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tsb(path: str, dataset: DomainDataset):
    meta = dataset.meta
    parts = [
        TSB_MAGIC,
        struct.pack("<IIIIBI", TSB_VERSION, len(dataset.instances), meta.channels, meta.length,
                    _TASK_CODES[meta.task], meta.num_classes),
    ]
    for instance in dataset.instances:
        values = np.asarray(instance.values, dtype=np.float32)
        if values.shape != (meta.channels, meta.length):
            raise HeaderInconsistent(
                f"instance shape {values.shape} != ({meta.channels}, {meta.length})")
        parts.append(_label_bytes(meta, instance))
        parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise TruncatedFile(f"{self.path}: expected {n} more bytes at offset {self.offset}")
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk


def load_tsb(path: str, meta: DomainMeta | None = None) -> DomainDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob, path)
    magic = reader.take(4)
    if magic != TSB_MAGIC:
        raise MagicMismatch(f"{path}: bad magic {magic!r}, expected {TSB_MAGIC!r}")
    version, count, channels, length, task_code, num_classes = struct.unpack(
        "<IIIIBI", reader.take(21))
    if version != TSB_VERSION:
        raise HeaderInconsistent(f"{path}: unsupported version {version}")
    if task_code not in _TASK_NAMES:
        raise HeaderInconsistent(f"{path}: unknown task code {task_code}")
    task = _TASK_NAMES[task_code]
    if meta is not None:
        mismatches = [
            (key, got, expected)
            for key, got, expected in (
                ("channels", channels, meta.channels),
                ("length", length, meta.length),
                ("task", task, meta.task),
                ("num_classes", num_classes, meta.num_classes),
            )
            if got != expected
        ]
        if mismatches:
            detail = ", ".join(f"{k}: file has {g}, meta has {e}" for k, g, e in mismatches)
            raise HeaderInconsistent(f"{path}: header disagrees with domain.meta ({detail})")
        out_meta = meta
    else:
        out_meta = DomainMeta(
            name=os.path.splitext(os.path.basename(path))[0],
            channels=channels, length=length, patch_size=1, task=task, num_classes=num_classes)
    if channels < 1 or length < 1 or num_classes < 1:
        raise HeaderInconsistent(f"{path}: non-positive header field")

    instances = []
    values_bytes = channels * length * 4
    for _ in range(count):
        if task == TASK_MULTICLASS:
            (label,) = struct.unpack("<I", reader.take(4))
            if label >= num_classes:
                raise HeaderInconsistent(f"{path}: label {label} out of range [0, {num_classes})")
            label_value = int(label)
        else:
            vec = np.frombuffer(reader.take(num_classes), dtype=np.uint8).copy()
            if np.any(vec > 1):
                raise HeaderInconsistent(f"{path}: multilabel entries must be 0 or 1")
            label_value = vec
        values = np.frombuffer(reader.take(values_bytes), dtype="<f4").reshape(channels, length)
        instances.append(TimeSeriesInstance(values=values.astype(np.float32), label=label_value))
    if reader.offset != len(blob):
        raise HeaderInconsistent(f"{path}: {len(blob) - reader.offset} trailing bytes after last instance")
    return DomainDataset(meta=out_meta, instances=instances)


# ---------------------------------------------------------------------------
# domain directories (domain.meta + train.tsb + test.tsb)


def format_meta(meta: DomainMeta) -> str:
    return "".join(
        f"{key}={getattr(meta, key)}\n" for key in META_KEYS
    )


def parse_meta(text: str, path: str = "domain.meta") -> DomainMeta:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise HeaderInconsistent(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in META_KEYS:
            raise HeaderInconsistent(f"{path}:{lineno}: unknown key {key!r}")
        if key in fields:
            raise HeaderInconsistent(f"{path}:{lineno}: duplicate key {key!r}")
        fields[key] = value
    missing = [k for k in META_KEYS if k not in fields]
    if missing:
        raise HeaderInconsistent(f"{path}: missing keys {missing}")
    try:
        return DomainMeta(
            name=fields["name"],
            channels=int(fields["channels"]),
            length=int(fields["length"]),
            patch_size=int(fields["patch_size"]),
            task=fields["task"],
            num_classes=int(fields["num_classes"]),
        )
    except ValueError as exc:
        raise HeaderInconsistent(f"{path}: {exc}") from exc


def save_domain(directory: str, train: DomainDataset, test: DomainDataset):
    if train.meta != test.meta:
        raise HeaderInconsistent("train and test splits disagree on domain metadata")
    os.makedirs(directory, exist_ok=True)
    _atomic_write(os.path.join(directory, "domain.meta"), format_meta(train.meta).encode())
    save_tsb(os.path.join(directory, "train.tsb"), train)
    save_tsb(os.path.join(directory, "test.tsb"), test)


def load_domain(directory: str) -> tuple[DomainDataset, DomainDataset]:
    meta_path = os.path.join(directory, "domain.meta")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = parse_meta(fh.read(), meta_path)
    train = load_tsb(os.path.join(directory, "train.tsb"), meta)
    test = load_tsb(os.path.join(directory, "test.tsb"), meta)
    return train, test


# ---------------------------------------------------------------------------
# CSV ingestion


def import_csv(path: str, meta: DomainMeta) -> DomainDataset:
    """Read one instance per line: label field(s) first, then C*T values
    channel-major.  Multilabel rows start with num_classes 0/1 fields."""
    label_fields = 1 if meta.task == TASK_MULTICLASS else meta.num_classes
    expected = label_fields + meta.channels * meta.length
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for row, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) != expected:
                raise ValueError(
                    f"{path}: row {row}: expected {expected} fields "
                    f"({label_fields} label + {meta.channels * meta.length} values), got {len(fields)}")
            try:
                if meta.task == TASK_MULTICLASS:
                    label = int(fields[0])
                    if not 0 <= label < meta.num_classes:
                        raise ValueError(f"label {label} out of range [0, {meta.num_classes})")
                else:
                    bits = [int(f) for f in fields[:label_fields]]
                    if any(b not in (0, 1) for b in bits):
                        raise ValueError("multilabel fields must be 0 or 1")
                    label = np.array(bits, dtype=np.uint8)
            except ValueError as exc:
                raise ValueError(f"{path}: row {row}, column 1: {exc}") from None
            values = np.empty(meta.channels * meta.length, dtype=np.float32)
            for col, text in enumerate(fields[label_fields:], start=label_fields + 1):
                try:
                    values[col - label_fields - 1] = float(text)
                except ValueError:
                    raise ValueError(f"{path}: row {row}, column {col}: not a number: {text!r}") from None
            instances.append(TimeSeriesInstance(
                values=values.reshape(meta.channels, meta.length), label=label))
    return DomainDataset(meta=meta, instances=instances)


# ---------------------------------------------------------------------------
# synthetic corpus
#
# Three domains with deliberately different shapes and tasks:
#   motion: 3ch x 128, 6-class.  Each class is a distinct ordering of the
#     same four constant-frequency segments, so per-class sample statistics
#     match and only the temporal arrangement carries the label.
#   waves: 2ch x 300, 4-class waveform identification (sine / square /
#     sawtooth / chirp) with randomized base frequency and phase.
#   beats: 4ch x 500, 5-label multilabel.  A slow baseline plus up to five
#     patch-aligned motifs, each tied to one label bit.

MOTION_FREQS = (2.0, 3.5, 5.5, 8.0)  # cycles per segment
MOTION_ORDERINGS = (
    (0, 1, 2, 3), (3, 2, 1, 0), (1, 3, 0, 2),
    (2, 0, 3, 1), (0, 2, 1, 3), (3, 1, 2, 0),
)
MOTION_META = DomainMeta("motion", channels=3, length=128, patch_size=2,
                         task=TASK_MULTICLASS, num_classes=6)
WAVES_META = DomainMeta("waves", channels=2, length=300, patch_size=10,
                        task=TASK_MULTICLASS, num_classes=4)
BEATS_META = DomainMeta("beats", channels=4, length=500, patch_size=10,
                        task=TASK_MULTILABEL, num_classes=5)
BEATS_SLOTS = ((4, 5), (13, 14), (22, 23), (31, 32), (40, 41))
NOISE_STD = 0.07


def _motion_instance(rng: SeededRng, label: int) -> TimeSeriesInstance:
    order = MOTION_ORDERINGS[label]
    seg_len = MOTION_META.length // len(order)
    freqs = np.repeat([MOTION_FREQS[i] for i in order], seg_len)
    phase = np.cumsum(2.0 * np.pi * freqs / seg_len)
    phase += rng.uniform(0.0, 2.0 * np.pi)
    offsets = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
    values = np.sin(phase[None, :] + offsets[:, None])
    values = values + rng.normal(0.0, NOISE_STD, values.shape)
    return TimeSeriesInstance(values=values.astype(np.float32), label=label)


def _waves_instance(rng: SeededRng, label: int) -> TimeSeriesInstance:
    t = np.arange(WAVES_META.length) / WAVES_META.length
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    if label == 3:  # chirp: frequency ramps into the sine band
        f0 = rng.uniform(3.0, 5.0)
        inst_freq = f0 * (1.0 + 1.2 * t)
        phase = phase0 + 2.0 * np.pi * np.cumsum(inst_freq) / WAVES_META.length
    else:
        freq = rng.uniform(3.0, 8.0)
        phase = phase0 + 2.0 * np.pi * freq * t
    quarter = np.pi / 2.0
    if label == 1:  # rounded square: saturated sine, edges span a few samples
        shape = lambda p: np.tanh(3.0 * np.sin(p))
    elif label == 2:  # triangle
        shape = lambda p: 2.0 / np.pi * np.arcsin(np.sin(p))
    else:  # sine and chirp
        shape = np.sin
    values = np.stack([shape(phase), shape(phase + quarter)])
    values = values + rng.normal(0.0, NOISE_STD, values.shape)
    return TimeSeriesInstance(values=values.astype(np.float32), label=label)


def _beat_shape(kind: int, width: int) -> np.ndarray:
    # every shape is smooth and vanishes at the slot edges, so motifs splice
    # into the baseline rhythm without jump discontinuities
    x = np.linspace(-1.0, 1.0, width)
    hann = 0.5 * (1.0 + np.cos(np.pi * x))
    if kind == 0:  # bump
        return np.exp(-8.0 * x * x)
    if kind == 1:  # biphasic wave
        return np.sin(np.pi * x) * np.exp(-4.0 * x * x)
    if kind == 2:  # trough
        return -hann
    if kind == 3:  # antisymmetric swell
        return 2.0 * x * (1.0 - x * x)
    return np.cos(3.0 * np.pi * x) * hann  # slow ringing


def _beats_instance(rng: SeededRng, label_bits: np.ndarray) -> TimeSeriesInstance:
    meta = BEATS_META
    t = np.arange(meta.length) / meta.length
    # one shared baseline rhythm seen by every channel at a fixed lag, the way
    # simultaneous leads view a common source
    freq = rng.uniform(1.0, 1.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    lags = 0.4 * np.arange(meta.channels)
    values = np.sin(2.0 * np.pi * freq * t[None, :] + phase + lags[:, None])
    # every motif is the same smooth beat complex on the rhythm lead
    # (channel 0); the label bit is carried by WHERE it fires, one slot per
    # class, which keeps the tokenizer's patch vocabulary small while the
    # position-aware encoder can still read off each bit
    width = 2 * meta.patch_size
    for motif, bit in enumerate(label_bits):
        if not bit:
            continue
        start = BEATS_SLOTS[motif][0] * meta.patch_size
        values[0, start : start + width] += 0.8 * _beat_shape(0, width)
    values = values + rng.normal(0.0, NOISE_STD, values.shape)
    return TimeSeriesInstance(values=values.astype(np.float32), label=label_bits.astype(np.uint8))


def _synth_split(meta: DomainMeta, rng: SeededRng, count: int) -> DomainDataset:
    if meta.task == TASK_MULTICLASS:
        if count % meta.num_classes:
            raise ValueError(
                f"{meta.name}: split size {count} not divisible by {meta.num_classes} classes")
        labels = np.tile(np.arange(meta.num_classes), count // meta.num_classes)
        labels = labels[rng.permutation(count)]
    else:
        labels = (rng.uniform(size=(count, meta.num_classes)) < 0.5).astype(np.uint8)
    builders = {"motion": _motion_instance, "waves": _waves_instance, "beats": _beats_instance}
    build = builders[meta.name]
    instances = [build(rng.child(i), labels[i]) for i in range(count)]
    return DomainDataset(meta=meta, instances=instances)


DEFAULT_DOMAINS = ("motion", "waves", "beats")
_DOMAIN_METAS = {"motion": MOTION_META, "waves": WAVES_META, "beats": BEATS_META}


def synth_corpus(seed: int, train_size: int = 240, test_size: int = 120,
                 domains=DEFAULT_DOMAINS) -> dict:
    """Deterministic multi-domain corpus: {name: (train, test)}.

    Train and test draw from disjoint random substreams, so resizing one
    split never perturbs the other.
    """
    root = SeededRng(seed)
    corpus = {}
    for index, name in enumerate(domains):
        if name not in _DOMAIN_METAS:
            raise ValueError(f"unknown synthetic domain: {name!r}")
        meta = _DOMAIN_METAS[name]
        domain_rng = root.child(index)
        train = _synth_split(meta, domain_rng.child(0), train_size)
        test = _synth_split(meta, domain_rng.child(1), test_size)
        corpus[name] = (train, test)
    return corpus
