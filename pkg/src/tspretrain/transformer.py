"""Bidirectional transformer encoder over discrete token sequences.

BERT-shaped but desk-scale: learned absolute positional embeddings, post-
layer-norm residual blocks, GELU feed-forward, additive -1e9 masking of PAD
key positions.  Dropout (train mode only) is applied at the standard sites:
after the embedding sum, after the attention output projection, and after
the feed-forward output.

Parameter naming is the checkpoint contract::

    embedding.word            [vocab_rows, d_model]
    embedding.position        [max_len, d_model]
    embedding.norm.gamma/.beta
    layer{i}.attention.query/.key/.value/.output  (+ .bias)
    layer{i}.attention.norm.gamma/.beta
    layer{i}.ffn.inner/.output                    (+ .bias)
    layer{i}.ffn.norm.gamma/.beta
    head.mtp                  [d_model, logit_classes]  (+ .bias)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .rng import SeededRng
from .tensor import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_rows: int  # embedding table height (external vocabulary size)
    logit_classes: int  # MTP head width (size of the global token space)
    max_len: int  # longest supported sequence including the CLS slot
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    ffn: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if min(self.vocab_rows, self.logit_classes, self.max_len, self.layers) < 1:
            raise ValueError("encoder dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_manifest(self) -> dict:
        return {f"encoder.{k}": getattr(self, k) for k in (
            "vocab_rows", "logit_classes", "max_len", "layers", "d_model",
            "heads", "ffn", "dropout")}

    @classmethod
    def from_manifest(cls, manifest: dict) -> "EncoderConfig":
        return cls(
            vocab_rows=int(manifest["encoder.vocab_rows"]),
            logit_classes=int(manifest["encoder.logit_classes"]),
            max_len=int(manifest["encoder.max_len"]),
            layers=int(manifest["encoder.layers"]),
            d_model=int(manifest["encoder.d_model"]),
            heads=int(manifest["encoder.heads"]),
            ffn=int(manifest["encoder.ffn"]),
            dropout=float(manifest["encoder.dropout"]),
        )


def init_encoder(config: EncoderConfig, rng: SeededRng) -> dict:
    d, f = config.d_model, config.ffn
    p = {
        "embedding.word": tt.init_embedding(rng, config.vocab_rows, d),
        "embedding.position": tt.init_embedding(rng, config.max_len, d),
        "embedding.norm.gamma": tt.ones_param((d,)),
        "embedding.norm.beta": tt.zeros_param((d,)),
    }
    for i in range(config.layers):
        for proj in ("query", "key", "value", "output"):
            p[f"layer{i}.attention.{proj}"] = tt.init_dense(rng, d, d)
            p[f"layer{i}.attention.{proj}.bias"] = tt.zeros_param((d,))
        p[f"layer{i}.attention.norm.gamma"] = tt.ones_param((d,))
        p[f"layer{i}.attention.norm.beta"] = tt.zeros_param((d,))
        p[f"layer{i}.ffn.inner"] = tt.init_dense(rng, d, f)
        p[f"layer{i}.ffn.inner.bias"] = tt.zeros_param((f,))
        p[f"layer{i}.ffn.output"] = tt.init_dense(rng, f, d)
        p[f"layer{i}.ffn.output.bias"] = tt.zeros_param((d,))
        p[f"layer{i}.ffn.norm.gamma"] = tt.ones_param((d,))
        p[f"layer{i}.ffn.norm.beta"] = tt.zeros_param((d,))
    # Small-variance head: initial logits stay near-uniform, so the first
    # masked-prediction loss starts at ~ln(logit_classes).
    p["head.mtp"] = tt.init_embedding(rng, d, config.logit_classes)
    p["head.mtp.bias"] = tt.zeros_param((config.logit_classes,))
    return p


def parameter_shapes(config: EncoderConfig) -> dict:
    """Expected name -> shape map; drives checkpoint validation."""
    d, f = config.d_model, config.ffn
    shapes = {
        "embedding.word": (config.vocab_rows, d),
        "embedding.position": (config.max_len, d),
        "embedding.norm.gamma": (d,),
        "embedding.norm.beta": (d,),
    }
    for i in range(config.layers):
        for proj in ("query", "key", "value", "output"):
            shapes[f"layer{i}.attention.{proj}"] = (d, d)
            shapes[f"layer{i}.attention.{proj}.bias"] = (d,)
        shapes[f"layer{i}.attention.norm.gamma"] = (d,)
        shapes[f"layer{i}.attention.norm.beta"] = (d,)
        shapes[f"layer{i}.ffn.inner"] = (d, f)
        shapes[f"layer{i}.ffn.inner.bias"] = (f,)
        shapes[f"layer{i}.ffn.output"] = (f, d)
        shapes[f"layer{i}.ffn.output.bias"] = (d,)
        shapes[f"layer{i}.ffn.norm.gamma"] = (d,)
        shapes[f"layer{i}.ffn.norm.beta"] = (d,)
    shapes["head.mtp"] = (d, config.logit_classes)
    shapes["head.mtp.bias"] = (config.logit_classes,)
    return shapes


def _dense(x, params, name):
    return x @ params[name] + params[f"{name}.bias"]


def encoder_forward(params: dict, config: EncoderConfig, rows: np.ndarray,
                    lengths: np.ndarray | None = None, rng: SeededRng | None = None,
                    train: bool = False) -> Tensor:
    """[B, S] embedding-row ids -> [B, S, d_model] contextual features.

    `rows` are already word-mapped (CLS first, PAD-filled to S); `lengths`
    gives each sequence's true length so PAD keys can be attention-masked.
    Training mode requires an rng for dropout.
    """
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ValueError(f"expected [batch, seq] ids, got shape {rows.shape}")
    batch, seq = rows.shape
    if seq > config.max_len:
        raise ValueError(f"sequence length {seq} exceeds max_len {config.max_len}")
    if rows.min() < 0 or rows.max() >= config.vocab_rows:
        raise ValueError(f"row id out of range [0, {config.vocab_rows})")
    if train and config.dropout > 0 and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")

    if lengths is None:
        lengths = np.full(batch, seq, dtype=np.int64)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
    pad_mask = np.where(np.arange(seq)[None, :] < lengths[:, None], 0.0, NEG_INF)
    mask = Tensor(pad_mask[:, None, None, :].astype(np.float32))  # [B, 1, 1, S]

    def drop(t):
        return tt.dropout(t, config.dropout, rng, train=train)

    x = tt.take_rows(params["embedding.word"], rows)
    x = x + tt.take_rows(params["embedding.position"], np.arange(seq))
    x = tt.layer_norm(x, params["embedding.norm.gamma"], params["embedding.norm.beta"])
    x = drop(x)

    h_count, h_dim = config.heads, config.head_dim
    scale = 1.0 / np.sqrt(h_dim)
    for i in range(config.layers):
        prefix = f"layer{i}"

        def split_heads(t):
            return tt.transpose(tt.reshape(t, (batch, seq, h_count, h_dim)), (0, 2, 1, 3))

        q = split_heads(_dense(x, params, f"{prefix}.attention.query"))
        k = split_heads(_dense(x, params, f"{prefix}.attention.key"))
        v = split_heads(_dense(x, params, f"{prefix}.attention.value"))
        scores = (q @ tt.transpose(k, (0, 1, 3, 2))) * scale + mask
        probs = tt.softmax(scores)  # [B, H, S, S]
        context = tt.reshape(tt.transpose(probs @ v, (0, 2, 1, 3)), (batch, seq, config.d_model))
        attn_out = drop(_dense(context, params, f"{prefix}.attention.output"))
        x = tt.layer_norm(x + attn_out, params[f"{prefix}.attention.norm.gamma"],
                          params[f"{prefix}.attention.norm.beta"])

        ffn_out = drop(_dense(tt.gelu(_dense(x, params, f"{prefix}.ffn.inner")),
                              params, f"{prefix}.ffn.output"))
        x = tt.layer_norm(x + ffn_out, params[f"{prefix}.ffn.norm.gamma"],
                          params[f"{prefix}.ffn.norm.beta"])
    return x


def attention_maps(params: dict, config: EncoderConfig, rows: np.ndarray,
                   lengths: np.ndarray | None = None) -> np.ndarray:
    """Eval-mode attention distributions: [layers, B, heads, S, S]."""
    rows = np.asarray(rows)
    batch, seq = rows.shape
    if lengths is None:
        lengths = np.full(batch, seq, dtype=np.int64)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
    pad_mask = np.where(np.arange(seq)[None, :] < lengths[:, None], 0.0, NEG_INF)
    mask = Tensor(pad_mask[:, None, None, :].astype(np.float32))

    x = tt.take_rows(params["embedding.word"], rows)
    x = x + tt.take_rows(params["embedding.position"], np.arange(seq))
    x = tt.layer_norm(x, params["embedding.norm.gamma"], params["embedding.norm.beta"])
    h_count, h_dim = config.heads, config.head_dim
    scale = 1.0 / np.sqrt(h_dim)
    maps = []
    for i in range(config.layers):
        prefix = f"layer{i}"

        def split_heads(t):
            return tt.transpose(tt.reshape(t, (batch, seq, h_count, h_dim)), (0, 2, 1, 3))

        q = split_heads(_dense(x, params, f"{prefix}.attention.query"))
        k = split_heads(_dense(x, params, f"{prefix}.attention.key"))
        v = split_heads(_dense(x, params, f"{prefix}.attention.value"))
        probs = tt.softmax((q @ tt.transpose(k, (0, 1, 3, 2))) * scale + mask)
        maps.append(probs.data.copy())
        context = tt.reshape(tt.transpose(probs @ v, (0, 2, 1, 3)), (batch, seq, config.d_model))
        x = tt.layer_norm(x + _dense(context, params, f"{prefix}.attention.output"),
                          params[f"{prefix}.attention.norm.gamma"],
                          params[f"{prefix}.attention.norm.beta"])
        ffn_out = _dense(tt.gelu(_dense(x, params, f"{prefix}.ffn.inner")),
                         params, f"{prefix}.ffn.output")
        x = tt.layer_norm(x + ffn_out, params[f"{prefix}.ffn.norm.gamma"],
                          params[f"{prefix}.ffn.norm.beta"])
    return np.stack(maps)


def mtp_logits(params: dict, features: Tensor) -> Tensor:
    """Project features (any leading shape) onto the global token space."""
    return features @ params["head.mtp"] + params["head.mtp.bias"]


def encoder_param_names(config: EncoderConfig) -> list:
    """Parameters belonging to the encoder proper (excludes the MTP head)."""
    return [name for name in parameter_shapes(config) if not name.startswith("head.")]
