"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and build a computation graph as ops execute; a
backward sweep over the topologically ordered graph accumulates gradients
into every ``requires_grad`` leaf.  Only the operator set needed by the
convolutional tokenizer and the transformer encoder is provided — this is
not a general broadcasting algebra.

Training runs in float32; passing float64 arrays switches the whole graph
to float64, which the gradient-check tests rely on.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op="leaf"):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        """Same values, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        autodiff_backward(self)

    # operator sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward):
    track = any(p.requires_grad or p._parents for p in parents)
    out = Tensor(data, requires_grad=False, _parents=parents if track else (), _op=op)
    if track:
        out._backward = backward
    return out


class ComputationRecord:
    """Topologically ordered op nodes reachable from one root tensor."""

    def __init__(self, nodes):
        self.nodes = nodes
        assert len(nodes) == len(set(map(id, nodes))), "cyclic or duplicated record"

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        nodes, visited, stack = [], set(), [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        return cls(nodes)

    def leaves(self):
        return [n for n in self.nodes if n.requires_grad and not n._parents]


def autodiff_backward(loss: Tensor, record: ComputationRecord | None = None, leaves=None):
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf.

    Leaves passed explicitly but unreachable from the loss get zero
    gradients, so optimizers can treat every parameter uniformly.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if record is None:
        record = ComputationRecord.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    return record


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), "add", backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), "sub", backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), "mul", backward)


def power(a, exponent):
    a = _lift(a)
    exponent = float(exponent)
    out_data = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), f"pow{exponent}", backward)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            if b.data.ndim == 1:
                a._accumulate(_unbroadcast(np.outer(g, b.data) if g.ndim else g * b.data, a.data.shape))
            else:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad or b._parents:
            if a.data.ndim == 1:
                gb = a.data * g if np.ndim(g) == 0 else np.outer(a.data, g)
                b._accumulate(_unbroadcast(gb, b.data.shape))
            elif b.data.ndim == 1:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g if g.ndim else a.data * g, b.data.shape))
            else:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), "matmul", backward)


def reshape(a, shape):
    a = _lift(a)
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(in_shape))

    return _make(out_data, (a,), "reshape", backward)


def transpose(a, axes):
    a = _lift(a)
    inverse = np.argsort(axes)
    out_data = np.transpose(a.data, axes)

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(out_data, (a,), "transpose", backward)


def reduce_sum(a, axis=None, keepdims=False):
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g_exp = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g_exp, a.data.shape).copy())

    return _make(out_data, (a,), "sum", backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = _lift(a)
    count = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def relu(a):
    a = _lift(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), "relu", backward)


def gelu(a):
    """Exact erf formulation; derivative is Phi(x) + x*phi(x)."""
    a = _lift(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        a._accumulate(g * (cdf + a.data * pdf))

    return _make(out_data, (a,), "gelu", backward)


def sigmoid(a):
    a = _lift(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), "sigmoid", backward)


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), "softmax", backward)


def dropout(a, p, rng, train=True):
    """Inverted dropout; identity when eval or p == 0."""
    if not train or p <= 0.0:
        return _lift(a)
    a = _lift(a)
    keep = (rng.uniform(size=a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


def take_rows(table, indices):
    """Gather rows of a 2-D table by an integer index array (embedding lookup)."""
    table = _lift(table)
    indices = np.asarray(indices)
    out_data = table.data[indices]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, indices.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return _make(out_data, (table,), "take_rows", backward)


def take_positions(x, batch_idx, pos_idx):
    """Gather x[b, t, :] pairs from a [B, T, D] tensor."""
    x = _lift(x)
    batch_idx = np.asarray(batch_idx)
    pos_idx = np.asarray(pos_idx)
    out_data = x.data[batch_idx, pos_idx]

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (batch_idx, pos_idx), g)

    return _make(out_data, (x,), "take_positions", backward)


def tile_last(a, n):
    """Append a trailing axis of length n by repetition: [..., d] -> [..., d, n]."""
    a = _lift(a)
    out_data = np.repeat(a.data[..., None], n, axis=-1)

    def backward(g):
        a._accumulate(g.sum(axis=-1))

    return _make(out_data, (a,), "tile_last", backward)


# ---------------------------------------------------------------------------
# fused neural-network ops


def layer_norm(a, gamma, beta, epsilon=1e-5):
    """Normalize over the last axis with population variance, then scale/shift."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad or gamma._parents:
            gamma._accumulate((g * xhat).sum(axis=lead))
        if beta.requires_grad or beta._parents:
            beta._accumulate(g.sum(axis=lead))
        if a.requires_grad or a._parents:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv_std * (gx - m1 - xhat * m2))

    return _make(out_data, (a, gamma, beta), "layer_norm", backward)


def conv1d(x, kernel, bias=None, dilation=1, padding="same"):
    """Dilated 1-D convolution over the trailing time axis.

    x: [C_in, T] or [B, C_in, T]; kernel: [C_out, C_in, k]; bias: [C_out].
    padding="same" keeps T by zero-padding (k-1)*dilation on the left
    (causal taps, so token boundaries never see future samples);
    padding="valid" shrinks T and requires the receptive field to fit.
    """
    x, kernel = _lift(x), _lift(kernel)
    if bias is not None:
        bias = _lift(bias)
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    batch, c_in, t = xd.shape
    c_out, kc_in, k = kernel.data.shape
    if kc_in != c_in:
        raise ValueError(f"kernel expects {kc_in} input channels, input has {c_in}")
    span = (k - 1) * dilation
    if padding == "same":
        left, t_out = span, t
    elif padding == "valid":
        if span + 1 > t:
            raise ValueError(f"receptive field {span + 1} exceeds input length {t} under valid padding")
        left, t_out = 0, t - span
    else:
        raise ValueError(f"unknown padding mode: {padding!r}")

    if left:
        xp = np.zeros((batch, c_in, t + left), dtype=xd.dtype)
        xp[:, :, left:] = xd
    else:
        xp = xd
    cols = np.empty((batch, t_out, c_in, k), dtype=xd.dtype)
    for j in range(k):
        cols[:, :, :, j] = xp[:, :, j * dilation : j * dilation + t_out].transpose(0, 2, 1)
    cols2 = cols.reshape(batch * t_out, c_in * k)
    w2 = kernel.data.reshape(c_out, c_in * k)
    out2 = cols2 @ w2.T
    out_data = out2.reshape(batch, t_out, c_out).transpose(0, 2, 1)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]
    if squeeze:
        out_data = out_data[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gd = g[None] if squeeze else g
        g2 = gd.transpose(0, 2, 1).reshape(batch * t_out, c_out)
        if kernel.requires_grad or kernel._parents:
            kernel._accumulate((g2.T @ cols2).reshape(c_out, c_in, k))
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad or x._parents:
            gcols = (g2 @ w2).reshape(batch, t_out, c_in, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation : j * dilation + t_out] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, left:] if left else gxp
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out_data, parents, "conv1d", backward)


def conv1d_cl(x, kernel, bias=None, dilation=1, padding="same"):
    """Channels-last twin of :func:`conv1d`: x is [B, T, C_in], output
    [B, T_out, C_out].  Same kernel layout [C_out, C_in, k], same causal
    "same" / "valid" padding semantics.  Keeping time next to the contiguous
    channel axis lets the whole convolution run as one GEMM without the
    transposes the channels-first layout forces, which is what the training
    loops use in their inner hot path.
    """
    x, kernel = _lift(x), _lift(kernel)
    if bias is not None:
        bias = _lift(bias)
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    batch, t, c_in = x.data.shape
    c_out, kc_in, k = kernel.data.shape
    if kc_in != c_in:
        raise ValueError(f"kernel expects {kc_in} input channels, input has {c_in}")
    span = (k - 1) * dilation
    if padding == "same":
        t_out = t
    elif padding == "valid":
        if span + 1 > t:
            raise ValueError(f"receptive field {span + 1} exceeds input length {t} under valid padding")
        t_out = t - span
    else:
        raise ValueError(f"unknown padding mode: {padding!r}")

    # cols[b, t, j, :] = x[b, t - (k-1-j)*dilation, :]  (zero where out of range)
    shifts = [(k - 1 - j) * dilation if padding == "same" else -j * dilation for j in range(k)]
    cols = np.zeros((batch, t_out, k, c_in), dtype=x.data.dtype)
    for j, s in enumerate(shifts):
        if s >= t_out:
            continue  # this tap's whole window precedes the signal
        if s >= 0:
            cols[:, s:, j, :] = x.data[:, : t_out - s, :]
        else:
            cols[:, :, j, :] = x.data[:, -s : t_out - s, :]
    cols2 = cols.reshape(batch * t_out, k * c_in)
    w2 = kernel.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out_data = (cols2 @ w2.T).reshape(batch, t_out, c_out)
    if bias is not None:
        out_data += bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(batch * t_out, c_out)
        if kernel.requires_grad or kernel._parents:
            kernel._accumulate((g2.T @ cols2).reshape(c_out, k, c_in).transpose(0, 2, 1))
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad or x._parents:
            gcols = (g2 @ w2).reshape(batch, t_out, k, c_in)
            gx = np.zeros_like(x.data)
            for j, s in enumerate(shifts):
                if s >= t_out:
                    continue
                if s >= 0:
                    gx[:, : t_out - s, :] += gcols[:, s:, j, :]
                else:
                    gx[:, -s : t_out - s, :] += gcols[:, :, j, :]
            x._accumulate(gx)

    return _make(out_data, parents, "conv1d_cl", backward)


def tile_axis1(a, n):
    """Insert a length-n repeated axis after the batch axis: [B, C] -> [B, n, C]."""
    a = _lift(a)
    out_data = np.repeat(a.data[:, None, :], n, axis=1)

    def backward(g):
        a._accumulate(g.sum(axis=1))

    return _make(out_data, (a,), "tile_axis1", backward)


def softmax_cross_entropy(logits, targets, reduction="mean"):
    """Negative log-likelihood of integer targets under softmax(logits).

    logits: [V] with scalar target, or [N, V] with [N] targets.  Computed in
    log-sum-exp-stable form; always >= 0 and equals ln V at uniform logits.
    """
    logits = _lift(logits)
    single = logits.data.ndim == 1
    ld = logits.data[None] if single else logits.data
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, v = ld.shape
    if t.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {t.shape}")
    if t.min() < 0 or t.max() >= v:
        raise ValueError(f"target out of range [0, {v})")
    m = ld.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=-1))
    losses = lse - ld[np.arange(n), t]
    if reduction == "mean":
        out_data = losses.mean()
        scale = 1.0 / n
    elif reduction == "sum":
        out_data = losses.sum()
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction: {reduction!r}")

    def backward(g):
        p = np.exp(ld - lse[:, None])
        p[np.arange(n), t] -= 1.0
        grad = (g * scale) * p
        logits._accumulate(grad[0] if single else grad)

    return _make(out_data, (logits,), "softmax_ce", backward)


def bce_with_logits(logits, targets, reduction="mean"):
    """Per-element sigmoid binary cross entropy against 0/1 targets."""
    logits = _lift(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    losses = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    if reduction == "mean":
        out_data = losses.mean()
        scale = 1.0 / losses.size
    elif reduction == "sum":
        out_data = losses.sum()
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction: {reduction!r}")

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-x))
        logits._accumulate((g * scale) * (s - t))

    return _make(out_data, (logits,), "bce", backward)


# ---------------------------------------------------------------------------
# parameter initialization


def init_conv_kernel(rng, c_out, c_in, k, dtype=DEFAULT_DTYPE):
    """He-style normal, std sqrt(2 / (c_in * k))."""
    std = np.sqrt(2.0 / (c_in * k))
    return Tensor(rng.normal(0.0, std, (c_out, c_in, k)).astype(dtype), requires_grad=True)


def init_dense(rng, fan_in, fan_out, dtype=DEFAULT_DTYPE):
    """Xavier-uniform weight matrix [fan_in, fan_out]."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype), requires_grad=True)


def init_embedding(rng, rows, dim, std=0.02, dtype=DEFAULT_DTYPE):
    return Tensor(rng.normal(0.0, std, (rows, dim)).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=DEFAULT_DTYPE):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
