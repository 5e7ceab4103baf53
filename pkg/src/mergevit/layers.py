"""Weight containers and attention/FFN building blocks shared by the merger and backbone."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (
    NEG_FILL,
    Tensor,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    softmax_lastdim,
)

LN_EPS = 1e-6


@dataclass
class LayerNormWeights:
    gamma: Tensor
    beta: Tensor


@dataclass
class AttentionWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class FfnWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def maybe_layer_norm(x: Tensor, ln: LayerNormWeights | None) -> Tensor:
    """Apply layer norm, or pass through when ``ln`` is None (test hook)."""
    if ln is None:
        return x
    return layer_norm(x, ln.gamma, ln.beta, LN_EPS)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, D] -> [..., heads, N, D/heads]."""
    *lead, n, d = x.shape
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, dh] -> [..., N, heads*dh]."""
    *lead, heads, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, heads * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head attention core on projected q/k/v of shape [..., N, D].

    ``key_mask`` (float/bool, broadcastable to [..., Nk]) marks real keys;
    masked positions receive an exact zero attention weight, so their values
    cannot influence the output at all.
    """
    dh = q.shape[-1] // heads
    qh = split_heads(q, heads)
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    scores = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        keep = np.asarray(key_mask, dtype=bool)
        # [..., Nk] -> [..., 1(heads), 1(Nq), Nk]
        keep = keep[..., None, None, :]
        scores = masked_fill(scores, keep, NEG_FILL)
    weights = softmax_lastdim(scores)
    return merge_heads(matmul(weights, vh))


def project(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def ffn_forward(x: Tensor, ffn: FfnWeights, ln: LayerNormWeights | None) -> Tensor:
    """Pre-norm feed-forward with residual: x + W2 gelu(W1 LN(x) + b1) + b2."""
    h = project(maybe_layer_norm(x, ln), ffn.w1, ffn.b1)
    return x + project(gelu(h), ffn.w2, ffn.b2)
