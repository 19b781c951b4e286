"""Discrete tokenization and cross-domain masked-token pre-training for
time series classification.

Pipeline: per-domain VQ tokenizers turn z-normalized patch sequences into
discrete token streams; a bidirectional transformer encoder is pre-trained
across domains with masked token prediction over a shared global token
space; downstream tasks adapt it by linear evaluation or full fine-tuning.
"""

from .data import (
    DomainDataset,
    DomainMeta,
    TimeSeriesInstance,
    load_domain,
    load_tsb,
    patchify,
    save_domain,
    save_tsb,
    synth_corpus,
    znormalize,
)
from .downstream import (
    EvalReport,
    FinetuneConfig,
    TokenizedSplit,
    compute_classification_metrics,
    run_full_finetune,
    run_linear_eval,
    tokenized_split,
)
from .pretrain import (
    EncoderCheckpoint,
    GlobalTokenSpace,
    PretrainConfig,
    build_token_space,
    load_checkpoint,
    load_external_weights,
    mask_plan,
    masked_eval,
    run_pretraining,
    save_checkpoint,
    word_map,
)
from .tokenizer import (
    TokenizerConfig,
    load_tokenizer,
    quantize,
    save_tokenizer,
    sax_tokenize,
    tokenize_dataset,
    tokenize_series,
    tokenizer_metrics,
    train_tokenizer,
)

__version__ = "0.1.0"

__all__ = [
    "DomainDataset",
    "DomainMeta",
    "EncoderCheckpoint",
    "EvalReport",
    "FinetuneConfig",
    "GlobalTokenSpace",
    "PretrainConfig",
    "TimeSeriesInstance",
    "TokenizedSplit",
    "TokenizerConfig",
    "build_token_space",
    "compute_classification_metrics",
    "load_checkpoint",
    "load_domain",
    "load_external_weights",
    "load_tokenizer",
    "load_tsb",
    "mask_plan",
    "masked_eval",
    "patchify",
    "quantize",
    "run_full_finetune",
    "run_linear_eval",
    "run_pretraining",
    "save_checkpoint",
    "save_domain",
    "save_tokenizer",
    "save_tsb",
    "sax_tokenize",
    "synth_corpus",
    "tokenize_dataset",
    "tokenize_series",
    "tokenized_split",
    "tokenizer_metrics",
    "train_tokenizer",
    "word_map",
    "znormalize",
]
