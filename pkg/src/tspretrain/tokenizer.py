"""Per-domain discrete tokenizer: convolutional encoder, vector-quantized
codebook, convolutional decoder.

Each patch [C, P] is encoded to a latent vector, snapped to its nearest
codebook entry (squared euclidean, ties to the smallest index), and decoded
back; training minimizes

    reconstruction MSE  +  ||sg(z) - e||^2  +  beta * ||z - sg(e)||^2

with the straight-through estimator carrying decoder gradients past the
non-differentiable snap.  A classical SAX discretizer is provided as a
baseline tokenizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from . import tensor as tt
from .data import DomainDataset, DomainMeta, patchify, znormalize
from .errors import HeaderInconsistent, ShapeMismatch
from .nta import load_nta, save_nta
from .optim import Adam
from .rng import SeededRng
from .tensor import Tensor


@dataclass(frozen=True)
class TokenizerConfig:
    channels: int
    patch_size: int
    codebook_size: int = 512
    code_dim: int = 64
    hidden: int = 64
    kernel: int = 3
    num_blocks: int = 4
    beta: float = 0.25
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    # re-seed never-used codes onto the latent cloud at each epoch boundary;
    # off by default — unused codes are tolerated, coverage is just reported
    reset_dead_codes: bool = False

    def __post_init__(self):
        if self.hidden != self.code_dim:
            raise ValueError(
                "encoder pools its hidden channels directly into the code space, "
                f"so hidden ({self.hidden}) must equal code_dim ({self.code_dim})")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be at least 2")

    @property
    def dilations(self):
        # double per block, but never dilate past the patch itself
        return tuple(min(2**i, self.patch_size) for i in range(self.num_blocks))

    @classmethod
    def for_meta(cls, meta: DomainMeta, **overrides) -> "TokenizerConfig":
        return cls(channels=meta.channels, patch_size=meta.patch_size, **overrides)


@dataclass
class TokenizerEpoch:
    epoch: int
    loss: float
    mse: float
    coverage: float


@dataclass
class TokenizerMetrics:
    mse: float
    coverage: float


def init_tokenizer(config: TokenizerConfig, rng: SeededRng) -> dict:
    """Named parameter tensors; names are stable and drive checkpoints."""
    p = {}
    h, k, d = config.hidden, config.kernel, config.code_dim

    def block(prefix, c_in):
        p[f"{prefix}.conv1"] = tt.init_conv_kernel(rng, h, c_in, k)
        p[f"{prefix}.conv1_bias"] = tt.zeros_param((h,))
        p[f"{prefix}.conv2"] = tt.init_conv_kernel(rng, h, h, k)
        p[f"{prefix}.conv2_bias"] = tt.zeros_param((h,))
        if c_in != h:
            p[f"{prefix}.project"] = tt.init_conv_kernel(rng, h, c_in, 1)

    for i in range(config.num_blocks):
        block(f"encoder.block{i}", config.channels if i == 0 else h)
    for i in range(config.num_blocks):
        block(f"decoder.block{i}", h)
    p["decoder.out"] = tt.init_conv_kernel(rng, config.channels, h, 1)
    p["decoder.out_bias"] = tt.zeros_param((config.channels,))
    limit = 1.0 / np.sqrt(d)
    p["codebook"] = Tensor(
        rng.uniform(-limit, limit, (config.codebook_size, d)).astype(np.float32),
        requires_grad=True)
    return p


def _residual_block(x, params, prefix, dilation):
    # conv-relu-conv with an identity (or 1x1-projected) skip; no activation
    # after the add, so block outputs stay roughly zero-mean and the latent
    # cloud surrounds the codebook instead of crowding one orthant
    h = tt.relu(tt.conv1d_cl(x, params[f"{prefix}.conv1"], params[f"{prefix}.conv1_bias"],
                             dilation=dilation))
    h = tt.conv1d_cl(h, params[f"{prefix}.conv2"], params[f"{prefix}.conv2_bias"],
                     dilation=dilation)
    if f"{prefix}.project" in params:
        x = tt.conv1d_cl(x, params[f"{prefix}.project"])
    return h + x


def _encode_cl(params: dict, x: Tensor, config: TokenizerConfig) -> Tensor:
    """Channels-last core: [N, P, C] -> [N, code_dim]."""
    for i, dilation in enumerate(config.dilations):
        x = _residual_block(x, params, f"encoder.block{i}", dilation)
    return tt.reduce_mean(x, axis=1)  # mean over time within the patch


def _decode_cl(params: dict, z: Tensor, config: TokenizerConfig) -> Tensor:
    """Channels-last core: [N, code_dim] -> [N, P, C]."""
    x = tt.tile_axis1(z, config.patch_size)  # broadcast latent along time
    for i, dilation in enumerate(config.dilations):
        x = _residual_block(x, params, f"decoder.block{i}", dilation)
    return tt.conv1d_cl(x, params["decoder.out"], params["decoder.out_bias"])


def encode_patches(params: dict, patches, config: TokenizerConfig) -> Tensor:
    """[N, C, P] patches -> [N, code_dim] latents (time-mean-pooled)."""
    if isinstance(patches, Tensor):
        if patches.shape[-2] != config.channels:
            raise ShapeMismatch("patch", (config.channels, config.patch_size),
                                tuple(patches.shape[-2:]))
        x = tt.transpose(patches, (0, 2, 1))
    else:
        patches = np.asarray(patches, np.float32)
        if patches.shape[-2] != config.channels:
            raise ShapeMismatch("patch", (config.channels, config.patch_size),
                                tuple(patches.shape[-2:]))
        x = Tensor(np.ascontiguousarray(patches.transpose(0, 2, 1)))
    return _encode_cl(params, x, config)


def decode_latents(params: dict, latents, config: TokenizerConfig) -> Tensor:
    """[N, code_dim] latents -> [N, C, P] reconstructions."""
    z = latents if isinstance(latents, Tensor) else Tensor(latents)
    return tt.transpose(_decode_cl(params, z, config), (0, 2, 1))


def encode_patch(params: dict, patch: np.ndarray, config: TokenizerConfig) -> np.ndarray:
    """Single [C, P] patch -> [code_dim] latent vector."""
    return encode_patches(params, np.asarray(patch, np.float32)[None], config).data[0]


def decode_patch(params: dict, z_q: np.ndarray, config: TokenizerConfig) -> np.ndarray:
    """Single [code_dim] quantized latent -> [C, P] reconstruction."""
    return decode_latents(params, np.asarray(z_q, np.float32)[None], config).data[0]


_CONTEST_REL = 1e-4


def quantize(latents: np.ndarray, codebook: np.ndarray):
    """Nearest codebook row per latent under squared euclidean distance.

    Semantics are those of the direct float32 computation
    ``sum((z - e_k)**2)`` with ties resolved to the smallest index.  A fast
    float64 inner-product pass picks the winner; rows where the two closest
    codes are within a 1e-4 relative margin (far wider than float32 rounding
    can reach) are re-resolved with the direct computation, so engineered
    exact ties and near-ties come out identical to the reference.

    Returns (indices [N] int32, quantized latents [N, D] float32).
    """
    z = np.ascontiguousarray(latents, dtype=np.float32)
    e = np.ascontiguousarray(codebook, dtype=np.float32)
    if z.ndim == 1:
        indices, zq = quantize(z[None], e)
        return int(indices[0]), zq[0]
    if e.ndim != 2 or e.shape[0] == 0:
        raise ValueError("codebook must be a non-empty K x d matrix")
    if z.ndim != 2 or z.shape[1] != e.shape[1]:
        raise ShapeMismatch("latents", ("N", e.shape[1]), z.shape)
    z64 = z.astype(np.float64)
    e64 = e.astype(np.float64)
    d2 = (z64 * z64).sum(axis=1)[:, None] - 2.0 * (z64 @ e64.T) + (e64 * e64).sum(axis=1)[None, :]
    indices = np.argmin(d2, axis=1)
    if e.shape[0] > 1:
        two = np.partition(d2, 1, axis=1)[:, :2]
        gap = np.abs(two[:, 1] - two[:, 0])
        contested = np.nonzero(gap <= _CONTEST_REL * (two[:, 0] + 1e-6))[0]
        for row in contested:
            direct = ((z[row][None, :] - e) ** 2).sum(axis=1)
            indices[row] = int(np.argmin(direct))
    indices = indices.astype(np.int32)
    return indices, e[indices]


def vq_loss(patch, patch_hat, z, z_q, beta: float = 0.25) -> float:
    """Scalar VQ objective for one patch (or a batch, averaged):

        ||patch - patch_hat||^2 / (C*P)  +  ||sg(z) - z_q||^2  +  beta * ||z - sg(z_q)||^2

    Value-level form; gradient routing happens in :func:`vq_training_loss`.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    patch = np.asarray(patch, np.float64)
    patch_hat = np.asarray(patch_hat, np.float64)
    z = np.asarray(z, np.float64)
    z_q = np.asarray(z_q, np.float64)
    batched = patch.ndim == 3
    lead = patch.shape[0] if batched else 1
    recon = ((patch - patch_hat) ** 2).sum() / (patch.size // lead) / lead
    codebook = ((z - z_q) ** 2).sum() / lead
    commit = beta * ((z - z_q) ** 2).sum() / lead
    return float(recon + codebook + commit)


def vq_training_loss(params: dict, patches: np.ndarray, config: TokenizerConfig,
                     channels_last: bool = False):
    """Build the full VQ training objective graph for one batch of patches.

    `patches` is [N, C, P], or [N, P, C] with channels_last=True (the
    training loop's native layout).  Returns (loss Tensor, indices, parts).
    """
    arr = np.asarray(patches, dtype=np.float32)
    if not channels_last:
        arr = np.ascontiguousarray(arr.transpose(0, 2, 1))
    x = Tensor(arr)  # [N, P, C]
    z = _encode_cl(params, x, config)
    indices, zq = quantize(z.data, params["codebook"].data)

    straight_through = z + Tensor(zq - z.data)  # value z_q, gradient to encoder
    recon = _decode_cl(params, straight_through, config)
    recon_term = tt.reduce_mean((x - recon) ** 2.0)

    chosen = tt.take_rows(params["codebook"], indices)
    codebook_term = tt.reduce_mean(tt.reduce_sum((chosen - z.detach()) ** 2.0, axis=1))
    commit_term = tt.reduce_mean(tt.reduce_sum((z - Tensor(zq)) ** 2.0, axis=1))

    loss = recon_term + codebook_term + config.beta * commit_term
    parts = {
        "recon": float(recon_term.data),
        "codebook": float(codebook_term.data),
        "commit": float(commit_term.data),
    }
    return loss, indices, parts


def _dataset_patches(dataset: DomainDataset, channels_last: bool = False) -> np.ndarray:
    """Z-normalize and patchify every instance.

    [num_instances, L, C, P], or [num_instances, L, P, C] with channels_last.
    """
    meta = dataset.meta
    out = np.empty((len(dataset), meta.num_patches, meta.channels, meta.patch_size),
                   dtype=np.float32)
    for i, inst in enumerate(dataset.instances):
        out[i] = patchify(znormalize(inst.values), meta.patch_size).patches
    if channels_last:
        out = np.ascontiguousarray(out.transpose(0, 1, 3, 2))
    return out


def train_tokenizer(dataset: DomainDataset, config: TokenizerConfig, seed: int,
                    progress=None):
    """Train on the instances of one domain split.

    Returns (params, trace) where trace is a list of TokenizerEpoch rows
    (mean training loss, element-mean reconstruction MSE, codebook coverage).
    """
    if not dataset.instances:
        raise ValueError("cannot train a tokenizer on an empty dataset")
    if config.channels != dataset.meta.channels or config.patch_size != dataset.meta.patch_size:
        raise HeaderInconsistent("tokenizer config does not match dataset metadata")
    root = SeededRng(seed)
    params = init_tokenizer(config, root.child(0))
    optimizer = Adam(params, lr=config.lr)
    all_patches = _dataset_patches(dataset, channels_last=True)
    count = len(dataset)
    shuffle_rng = root.child(1)
    reset_rng = root.child(2)
    trace = []
    for epoch in range(config.epochs):
        order = shuffle_rng.child(epoch).permutation(count)
        total_loss = total_sq = 0.0
        total_batches = total_elems = 0
        used = np.zeros(config.codebook_size, dtype=bool)
        for start in range(0, count, config.batch_size):
            batch = all_patches[order[start : start + config.batch_size]]
            flat = batch.reshape(-1, config.patch_size, config.channels)
            optimizer.zero_grad()
            loss, indices, parts = vq_training_loss(params, flat, config,
                                                    channels_last=True)
            tt.autodiff_backward(loss, leaves=list(params.values()))
            optimizer.step()
            total_loss += float(loss.data)
            total_batches += 1
            total_sq += parts["recon"] * flat.size
            total_elems += flat.size
            used[np.unique(indices)] = True
        row = TokenizerEpoch(
            epoch=epoch,
            loss=total_loss / max(1, total_batches),
            mse=total_sq / max(1, total_elems),
            coverage=float(used.sum()) / config.codebook_size,
        )
        trace.append(row)
        if progress is not None:
            progress(row)
        if config.reset_dead_codes and epoch + 1 < config.epochs:
            _reset_dead_codes(params, all_patches, used, config, reset_rng.child(epoch))
    return params, trace


def _reset_dead_codes(params: dict, all_patches: np.ndarray, used: np.ndarray,
                      config: TokenizerConfig, rng: SeededRng):
    """Move codes that went a whole epoch unused onto current encoder latents.

    Donors are latents of a random patch sample (with a little jitter so two
    dead codes never land identically); live codes are untouched.
    """
    dead = np.nonzero(~used)[0]
    if dead.size == 0:
        return
    flat = all_patches.reshape(-1, config.patch_size, config.channels)
    sample = rng.integers(0, flat.shape[0], size=min(flat.shape[0], 1024))
    latents = _encode_cl(params, Tensor(flat[sample]), config).data
    donors = latents[rng.integers(0, latents.shape[0], size=dead.size)]
    jitter = rng.normal(0.0, 0.01, donors.shape).astype(np.float32)
    params["codebook"].data[dead] = donors + jitter


def tokenize_series(values: np.ndarray, params: dict, config: TokenizerConfig) -> np.ndarray:
    """[C, T] raw series -> [L] int32 token ids (z-normalize, patch, encode, snap)."""
    seq = patchify(znormalize(values), config.patch_size).patches
    latents = encode_patches(params, seq, config)
    indices, _ = quantize(latents.data, params["codebook"].data)
    return indices


def tokenize_dataset(dataset: DomainDataset, params: dict, config: TokenizerConfig,
                     batch_size: int = 64) -> np.ndarray:
    """[num_instances, L] int32 token ids for a whole split."""
    patches = _dataset_patches(dataset, channels_last=True)
    n, length = patches.shape[0], patches.shape[1]
    tokens = np.empty((n, length), dtype=np.int32)
    for start in range(0, n, batch_size):
        chunk = patches[start : start + batch_size]
        flat = chunk.reshape(-1, config.patch_size, config.channels)
        latents = _encode_cl(params, Tensor(flat), config)
        idx, _ = quantize(latents.data, params["codebook"].data)
        tokens[start : start + chunk.shape[0]] = idx.reshape(chunk.shape[0], length)
    return tokens


def tokenizer_metrics(dataset: DomainDataset, params: dict, config: TokenizerConfig,
                      batch_size: int = 64) -> TokenizerMetrics:
    """Reconstruction MSE (element mean over z-normalized patches) and the
    fraction of codebook entries used at least once."""
    if not dataset.instances:
        raise ValueError("cannot compute tokenizer metrics on an empty dataset")
    patches = _dataset_patches(dataset, channels_last=True)
    used = np.zeros(config.codebook_size, dtype=bool)
    total_sq = 0.0
    total_elems = 0
    for start in range(0, patches.shape[0], batch_size):
        chunk = patches[start : start + batch_size]
        flat = chunk.reshape(-1, config.patch_size, config.channels)
        latents = _encode_cl(params, Tensor(flat), config)
        idx, zq = quantize(latents.data, params["codebook"].data)
        recon = _decode_cl(params, Tensor(zq), config)
        total_sq += float(((flat - recon.data) ** 2).sum())
        total_elems += flat.size
        used[np.unique(idx)] = True
    return TokenizerMetrics(mse=total_sq / max(1, total_elems),
                            coverage=float(used.sum()) / config.codebook_size)


# ---------------------------------------------------------------------------
# checkpoints


def save_tokenizer(path: str, params: dict, config: TokenizerConfig, domain: str,
                   seed: int, extra: dict | None = None):
    manifest = {
        "kind": "tokenizer",
        "domain": domain,
        "seed": seed,
        "K": config.codebook_size,
        "d": config.code_dim,
        "P": config.patch_size,
        "C": config.channels,
        "hidden": config.hidden,
        "kernel": config.kernel,
        "num_blocks": config.num_blocks,
        "beta": config.beta,
        "lr": config.lr,
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "reset_dead_codes": int(config.reset_dead_codes),
    }
    if extra:
        manifest.update(extra)
    save_nta(path, {name: p.data for name, p in params.items()}, manifest)


def load_tokenizer(path: str):
    """Returns (params, config, manifest)."""
    tensors, manifest = load_nta(path)
    if manifest.get("kind") != "tokenizer":
        raise HeaderInconsistent(f"{path}: not a tokenizer checkpoint")
    config = TokenizerConfig(
        channels=int(manifest["C"]),
        patch_size=int(manifest["P"]),
        codebook_size=int(manifest["K"]),
        code_dim=int(manifest["d"]),
        hidden=int(manifest["hidden"]),
        kernel=int(manifest["kernel"]),
        num_blocks=int(manifest["num_blocks"]),
        beta=float(manifest["beta"]),
        lr=float(manifest["lr"]),
        batch_size=int(manifest["batch_size"]),
        epochs=int(manifest["epochs"]),
        reset_dead_codes=bool(int(manifest.get("reset_dead_codes", "0"))),
    )
    params = {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
    return params, config, manifest


# ---------------------------------------------------------------------------
# SAX baseline


def sax_tokenize(values: np.ndarray, patch_size: int, alphabet_size: int = 8) -> np.ndarray:
    """Symbolic aggregate approximation: z-normalize, average each patch
    (PAA), then bin against standard-normal equiprobable breakpoints.

    Returns [C, L] int32 symbols, one stream per channel.
    """
    if alphabet_size < 2:
        raise ValueError("alphabet_size must be at least 2")
    z = znormalize(values)
    seq = patchify(z, patch_size).patches  # [L, C, P]
    paa = seq.mean(axis=2).T  # [C, L]
    breakpoints = norm.ppf(np.arange(1, alphabet_size) / alphabet_size)
    # side="right" puts a mean sitting exactly on a breakpoint into the bin above,
    # so PAA mean 0.0 lands in [0, 0.6745) as the quantile convention requires
    return np.searchsorted(breakpoints, paa, side="right").astype(np.int32)
