"""Transformer building blocks on top of the autodiff tensor core.

The attention entry points take an explicit :class:`AttentionMask`; every
other masking behaviour in the package (padding, causal, trigger spans) is
expressed through it. Blocked logits are set to a large negative value before
the softmax by default, so each output row stays a distribution over the
permitted keys; the literal post-softmax product is available as
``mode="literal"`` for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import FullyMaskedRowError, ShapeMismatchError
from .tensor import (
    Array,
    Tensor,
    concat_cols,
    gather_rows,
    log_row_softmax,
    masked_fill,
    matmul,
    mul,
    relu,
    row_softmax,
    slice_cols,
    sum_all,
    transpose,
)

# Large enough that exp(blocked - max) underflows to exactly 0.0 in f64.
NEG_FILL = -1.0e30

MASK_MODES = ("presoftmax", "literal")


@dataclass
class AttentionMask:
    """Binary attend/block matrix over (query row, key column) pairs."""

    bits: Array

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ShapeMismatchError("attention mask must be a matrix")

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def ones(cls, rows: int, cols: int) -> "AttentionMask":
        return cls(np.ones((rows, cols), dtype=bool))

    @classmethod
    def causal(cls, n: int) -> "AttentionMask":
        return cls(np.tril(np.ones((n, n), dtype=bool)))

    def validate(self) -> None:
        if not self.bits.any(axis=1).all():
            bad = int(np.flatnonzero(~self.bits.any(axis=1))[0])
            raise FullyMaskedRowError(f"mask row {bad} permits no keys")


def masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    m: AttentionMask,
    mode: str = "presoftmax",
    return_weights: bool = False,
):
    """Scaled dot-product attention restricted to the mask's support.

    Output row i is a convex combination of the ``v`` rows permitted by mask
    row i (in ``presoftmax`` mode; ``literal`` zeroes blocked weights after
    the softmax and is not row-normalised).
    """
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatchError("attention operands must be matrices")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatchError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatchError(f"key count {k.shape[0]} != value count {v.shape[0]}")
    if (m.rows, m.cols) != (q.shape[0], k.shape[0]):
        raise ShapeMismatchError(
            f"mask {m.rows}x{m.cols} does not cover {q.shape[0]} queries x {k.shape[0]} keys"
        )
    m.validate()

    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if mode == "presoftmax":
        weights = row_softmax(masked_fill(scores, m.bits, NEG_FILL))
    else:
        weights = mul(row_softmax(scores), m.bits.astype(np.float64))
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


@dataclass
class MhaParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    m: AttentionMask,
    params: MhaParams,
    n_heads: int,
    mode: str = "presoftmax",
) -> Tensor:
    """Concatenation of per-head masked attention followed by the output projection."""
    width = params.wq.shape[1]
    if width % n_heads != 0:
        raise ShapeMismatchError(f"{n_heads} heads do not divide width {width}")
    d_head = width // n_heads

    q = matmul(x_q, params.wq) + params.bq
    k = matmul(x_kv, params.wk) + params.bk
    v = matmul(x_kv, params.wv) + params.bv

    heads = []
    for h in range(n_heads):
        j0, j1 = h * d_head, (h + 1) * d_head
        heads.append(
            masked_attention(
                slice_cols(q, j0, j1), slice_cols(k, j0, j1), slice_cols(v, j0, j1), m, mode=mode
            )
        )
    merged = heads[0] if len(heads) == 1 else concat_cols(heads)
    return matmul(merged, params.wo) + params.bo


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return matmul(relu(matmul(x, w1) + b1), w2) + b2


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Per-row normalisation to zero mean / unit variance, then optional affine."""
    if x.ndim != 2:
        raise ShapeMismatchError("layer_norm expects a matrix")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    g = gamma.data if gamma is not None else None
    parents = [x] + [t for t in (gamma, beta) if t is not None]

    out = xhat if g is None else xhat * g[None, :]
    if beta is not None:
        out = out + beta.data[None, :]

    def bwd(grad: Array, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv, g=g):
        d = x.shape[1]
        if beta is not None:
            beta._accumulate(grad.sum(axis=0))
        if gamma is not None:
            gamma._accumulate((grad * xhat).sum(axis=0))
        dxhat = grad if g is None else grad * g[None, :]
        # classic layer-norm backward, per row
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        x._accumulate(dx)

    return Tensor(out, _parents=tuple(parents), _backward=bwd)


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    return gather_rows(weight, ids)


def sinusoidal_positional_encoding(length: int, width: int) -> Array:
    """The sine/cosine position table with base period 10000 (constant, not a node)."""
    if length < 1:
        raise ShapeMismatchError("positional encoding needs length >= 1")
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, width, 2, dtype=np.float64) * (-math.log(10000.0) / width))
    pe = np.zeros((length, width), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: pe[:, 1::2].shape[1]])
    return pe


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """2-D convolution over a (C_in, H, W) image via im2col; returns (C_out, H', W')."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeMismatchError("conv2d expects (C,H,W) input and (C_out,C_in,KH,KW) weights")
    c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ShapeMismatchError(f"conv2d: {c_in} input channels vs weights for {c_in_w}")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1

    padded = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    padded[:, pad : pad + h, pad : pad + w] = x.data
    cols = np.empty((c_in, kh, kw, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = padded[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    cols = cols.reshape(c_in * kh * kw, h_out * w_out)
    w_flat = weight.data.reshape(c_out, -1)
    out = (w_flat @ cols + bias.data[:, None]).reshape(c_out, h_out, w_out)

    def bwd(g: Array, x=x, weight=weight, bias=bias, cols=cols, w_flat=w_flat,
            dims=(c_in, h, w, kh, kw, h_out, w_out, stride, pad)):
        c_in, h, w, kh, kw, h_out, w_out, stride, pad = dims
        g_flat = g.reshape(g.shape[0], -1)
        bias._accumulate(g_flat.sum(axis=1))
        weight._accumulate((g_flat @ cols.T).reshape(weight.shape))
        if x.requires_grad:
            dcols = (w_flat.T @ g_flat).reshape(c_in, kh, kw, h_out, w_out)
            dpad = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
            for i in range(kh):
                for j in range(kw):
                    dpad[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += dcols[:, i, j]
            x._accumulate(dpad[:, pad : pad + h, pad : pad + w])

    return Tensor(out, _parents=(x, weight, bias), _backward=bwd)


def conv_frames(x: Tensor) -> Tensor:
    """(C, H, W) feature map to an (H, W*C) frame matrix."""
    if x.ndim != 3:
        raise ShapeMismatchError("conv_frames expects (C,H,W)")
    c, h, w = x.shape

    def bwd(g: Array, x=x, c=c, h=h, w=w):
        x._accumulate(g.reshape(h, w, c).transpose(2, 0, 1))

    return Tensor(np.ascontiguousarray(x.data.transpose(1, 2, 0)).reshape(h, w * c), _parents=(x,), _backward=bwd)


def cross_entropy_label_smoothed(logits: Tensor, targets, eps: float) -> Tensor:
    """Mean smoothed cross entropy over positions.

    The target distribution per position is ``(1-eps) * onehot + eps/V'``.
    """
    ids = np.asarray(list(targets), dtype=np.int64)
    n, vocab = logits.shape
    if ids.shape != (n,):
        raise ShapeMismatchError(f"{ids.size} targets for {n} logit rows")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeMismatchError(f"target id out of range 0..{vocab - 1}")

    q = np.full((n, vocab), eps / vocab, dtype=np.float64)
    q[np.arange(n), ids] += 1.0 - eps
    logp = log_row_softmax(logits)
    return mul(sum_all(mul(logp, q)), -1.0 / n)
