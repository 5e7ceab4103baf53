"""Adaptive token merging: any H x W token grid down to a fixed target grid.

The merge runs in iterations. Each iteration bins tokens into grids of at
most 2 x 2, pads short grids at their bottom/right edges with mask-0 tokens,
fuses every grid into one token with a pooled-query cross-attention, and
finishes with a feed-forward layer. One shared weight set serves every
iteration, so the parameter count is independent of the input resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidGridError, ShapeError, UnsupportedResolutionError
from .layers import (
    AttentionWeights,
    FfnWeights,
    LayerNormWeights,
    ffn_forward,
    maybe_layer_norm,
    project,
    scaled_dot_attention,
)
from .patches import TokenMap
from .tensor import Tensor, div_const, masked_fill, take_tokens


@dataclass(frozen=True)
class GridSpec:
    """One merge iteration: grid counts, per-grid token extents, padding."""

    g_th: int
    g_tw: int
    r_h: int
    r_w: int
    padded_h: int
    padded_w: int
    pad_rows: int
    pad_cols: int


@dataclass(frozen=True)
class MergeSchedule:
    input_h: int
    input_w: int
    target_h: int
    target_w: int
    steps: tuple[GridSpec, ...]


@dataclass
class AtmWeights:
    """Single weight set shared by every merge iteration."""

    attn: AttentionWeights
    ln_attn: LayerNormWeights | None
    ffn: FfnWeights
    ln_ffn: LayerNormWeights | None
    num_heads: int


def _axis_plan(n: int, g: int) -> list[tuple[int, int, int]]:
    """Per-axis reduction plan as (grid_count, per_grid, padded) triples.

    While the axis exceeds twice the target, halve it (padding odd sizes up
    by one); once within (g, 2g), pad straight to 2g and finish; an axis
    already at g contributes no reduction of its own.
    """
    plan = []
    cur = n
    while cur != g:
        gt = (cur + 1) // 2 if cur >= 2 * g else g
        plan.append((gt, 2, 2 * gt))
        cur = gt
    return plan


def compute_merge_schedule(h: int, w: int, g_h: int, g_w: int) -> MergeSchedule:
    """Joint reduction schedule from (h, w) tokens to the (g_h, g_w) target.

    Axes advance together; an axis that reaches its target first holds at
    per-grid extent 1 while the other keeps halving. An input already at the
    target yields exactly one extent-1 step (tokens pass through attention
    unfused).
    """
    if min(h, w, g_h, g_w) < 1:
        raise ShapeError("token and grid dimensions must be positive")
    if h < g_h or w < g_w:
        raise UnsupportedResolutionError(
            f"input grid {h}x{w} smaller than target {g_h}x{g_w}")
    plan_h = _axis_plan(h, g_h)
    plan_w = _axis_plan(w, g_w)
    n_steps = max(len(plan_h), len(plan_w), 1)
    plan_h += [(g_h, 1, g_h)] * (n_steps - len(plan_h))
    plan_w += [(g_w, 1, g_w)] * (n_steps - len(plan_w))

    steps = []
    cur_h, cur_w = h, w
    for (gth, rh, ph), (gtw, rw, pw) in zip(plan_h, plan_w):
        steps.append(GridSpec(
            g_th=gth, g_tw=gtw, r_h=rh, r_w=rw,
            padded_h=ph, padded_w=pw,
            pad_rows=ph - cur_h, pad_cols=pw - cur_w,
        ))
        cur_h, cur_w = gth, gtw
    return MergeSchedule(h, w, g_h, g_w, tuple(steps))


def _bin_starts(n: int, g: int) -> np.ndarray:
    return (np.arange(g + 1, dtype=np.intp) * n) // g


def _axis_maps(n: int, g: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Source index and validity for each padded position along one axis.

    Grid ``i`` owns source range [floor(i*n/g), floor((i+1)*n/g)); slots past
    the range are padding, placed at the grid's far edge.
    """
    starts = _bin_starts(n, g)
    pos = np.arange(g * r, dtype=np.intp)
    gi, si = pos // r, pos % r
    src = starts[gi] + si
    valid = src < starts[gi + 1]
    return np.where(valid, src, 0), valid


def _build_maps(h: int, w: int, g_th: int, g_tw: int, r_h: int, r_w: int,
                in_mask: np.ndarray):
    """Flat gather index, inverse map, and output mask for one merge step."""
    row_src, row_valid = _axis_maps(h, g_th, r_h)
    col_src, col_valid = _axis_maps(w, g_tw, r_w)
    flat_idx = (row_src[:, None] * w + col_src[None, :]).reshape(-1)
    valid = (row_valid[:, None] & col_valid[None, :]).reshape(-1)
    out_mask = np.where(valid, in_mask[row_src[:, None], col_src[None, :]].reshape(-1), 0.0)
    inverse = np.full(h * w, -1, dtype=np.intp)
    inverse[flat_idx[valid]] = np.nonzero(valid)[0]
    return flat_idx, valid, out_mask, inverse


def _pad_tokens(tokens: Tensor, in_mask: np.ndarray, g_th: int, g_tw: int,
                r_h: int, r_w: int, pad_value: float):
    """Rearrange [B, h, w, D] tokens into padded grid layout [B, Hp*Wp, D]."""
    b, h, w, d = tokens.shape
    flat_idx, valid, out_mask, inverse = _build_maps(h, w, g_th, g_tw, r_h, r_w, in_mask)
    flat = tokens.reshape(b, h * w, d)
    gathered = take_tokens(flat, flat_idx, inverse=inverse)
    padded = masked_fill(gathered, valid[:, None], pad_value)
    return padded, out_mask


def grid_pad(tm: TokenMap, spec: GridSpec, pad_value: float = 0.0) -> TokenMap:
    """Pad a token map so every grid is exactly r_h x r_w.

    Real tokens are distributed over grids by even binning; each grid is
    completed at its bottom/right with mask-0 tokens of value ``pad_value``.
    Every grid keeps at least one real token, and the total real-token count
    is unchanged.
    """
    if spec.padded_h - spec.pad_rows != tm.h or spec.padded_w - spec.pad_cols != tm.w:
        raise ShapeError(
            f"spec expects {spec.padded_h - spec.pad_rows}x{spec.padded_w - spec.pad_cols} "
            f"input, got {tm.h}x{tm.w}")
    tokens = tm.tokens.reshape(1, tm.h, tm.w, tm.dim)
    padded, out_mask = _pad_tokens(
        tokens, tm.mask, spec.g_th, spec.g_tw, spec.r_h, spec.r_w, pad_value)
    out = padded.reshape(spec.padded_h, spec.padded_w, tm.dim)
    return TokenMap(out, out_mask.reshape(spec.padded_h, spec.padded_w))


def _grid_attention_batch(grids: Tensor, mask: np.ndarray, w: AtmWeights) -> Tensor:
    """Fuse each grid of tokens into one token.

    ``grids`` is [..., r, D], ``mask`` broadcastable to [..., r]. The query is
    the mean of the real tokens; all grid tokens serve as keys/values with
    padding excluded from the softmax; the pooled mean is added back as the
    residual.
    """
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise InvalidGridError("a merge grid contains no real tokens")
    pooled = div_const((grids * mask[..., None]).sum(axis=-2, keepdims=True),
                       counts[..., None, None])
    q_in = maybe_layer_norm(pooled, w.ln_attn)
    kv_in = maybe_layer_norm(grids, w.ln_attn)
    q = project(q_in, w.attn.wq, w.attn.bq)
    k = project(kv_in, w.attn.wk, w.attn.bk)
    v = project(kv_in, w.attn.wv, w.attn.bv)
    attn = scaled_dot_attention(q, k, v, w.num_heads, key_mask=mask)
    return pooled + project(attn, w.attn.wo, w.attn.bo)


def grid_attention(grid_tokens: Tensor, grid_mask: np.ndarray, w: AtmWeights) -> Tensor:
    """Single-grid fusion: [r, D] tokens with a {0,1} mask down to one [D] token."""
    if grid_tokens.ndim != 2:
        raise ShapeError(f"grid tokens must be [r, D], got {grid_tokens.shape}")
    mask = np.asarray(grid_mask, dtype=np.float64).reshape(1, -1)
    out = _grid_attention_batch(grid_tokens.reshape(1, *grid_tokens.shape), mask, w)
    return out.reshape(grid_tokens.shape[-1])


def merge_step(tokens: Tensor, mask: np.ndarray, spec: GridSpec, w: AtmWeights,
               pad_value: float = 0.0) -> tuple[Tensor, np.ndarray]:
    """One merge iteration on batched [B, h, w, D] tokens; returns [B, g_th, g_tw, D]."""
    b, h, wd, d = tokens.shape
    padded, out_mask = _pad_tokens(tokens, mask, spec.g_th, spec.g_tw,
                                   spec.r_h, spec.r_w, pad_value)
    r = spec.r_h * spec.r_w
    grids = padded.reshape(b, spec.g_th, spec.r_h, spec.g_tw, spec.r_w, d)
    grids = grids.transpose((0, 1, 3, 2, 4, 5)).reshape(b, spec.g_th * spec.g_tw, r, d)
    gmask = out_mask.reshape(spec.g_th, spec.r_h, spec.g_tw, spec.r_w)
    gmask = gmask.transpose(0, 2, 1, 3).reshape(spec.g_th * spec.g_tw, r)

    fused = _grid_attention_batch(grids, gmask, w)
    fused = fused.reshape(b, spec.g_th * spec.g_tw, d)
    fused = ffn_forward(fused, w.ffn, w.ln_ffn)
    out = fused.reshape(b, spec.g_th, spec.g_tw, d)
    return out, np.ones((spec.g_th, spec.g_tw))


def merge_tokens(tokens: Tensor, mask: np.ndarray, w: AtmWeights,
                 schedule: MergeSchedule, pad_value: float = 0.0) -> Tensor:
    """Run the full merge schedule on batched tokens; output [B, g_h, g_w, D]."""
    if tokens.shape[1] != schedule.input_h or tokens.shape[2] != schedule.input_w:
        raise ShapeError(
            f"schedule built for {schedule.input_h}x{schedule.input_w}, "
            f"got {tokens.shape[1]}x{tokens.shape[2]}")
    for spec in schedule.steps:
        tokens, mask = merge_step(tokens, mask, spec, w, pad_value)
    return tokens


def atm_forward(tm: TokenMap, w: AtmWeights, schedule: MergeSchedule,
                pad_value: float = 0.0) -> TokenMap:
    """Merge a token map down to the schedule's target grid.

    The same ``w`` is applied at every step; the output mask is all-ones
    (merged tokens are real). ``pad_value`` sets the value written into
    padding slots; outputs are invariant to it because masking removes
    padding from both the pooled query and the attention softmax.
    """
    tokens = tm.tokens.reshape(1, tm.h, tm.w, tm.dim)
    out = merge_tokens(tokens, tm.mask, w, schedule, pad_value)
    g_h, g_w = schedule.target_h, schedule.target_w
    return TokenMap(out.reshape(g_h, g_w, tm.dim), np.ones((g_h, g_w)))


def avgpool_tokens(tokens: Tensor, mask: np.ndarray, g_h: int, g_w: int) -> Tensor:
    """Parameter-free adaptive average pooling of [B, h, w, D] to [B, g_h, g_w, D]."""
    b, h, w, d = tokens.shape
    if h < g_h or w < g_w:
        raise UnsupportedResolutionError(
            f"input grid {h}x{w} smaller than target {g_h}x{g_w}")
    r_h = math.ceil(h / g_h)
    r_w = math.ceil(w / g_w)
    padded, out_mask = _pad_tokens(tokens, mask, g_h, g_w, r_h, r_w, 0.0)
    r = r_h * r_w
    grids = padded.reshape(b, g_h, r_h, g_w, r_w, d)
    grids = grids.transpose((0, 1, 3, 2, 4, 5)).reshape(b, g_h * g_w, r, d)
    gmask = out_mask.reshape(g_h, r_h, g_w, r_w).transpose(0, 2, 1, 3).reshape(g_h * g_w, r)
    counts = gmask.sum(axis=-1)
    if np.any(counts == 0):
        raise InvalidGridError("an average-pool cell contains no real tokens")
    pooled = div_const((grids * gmask[..., None]).sum(axis=-2), counts[..., None])
    return pooled.reshape(b, g_h, g_w, d)


def avgpool_merge(tm: TokenMap, g_h: int, g_w: int) -> TokenMap:
    """Adaptive average pooling on a single token map; cell (a, b) averages
    source rows [floor(a*h/g_h), floor((a+1)*h/g_h)) x the analogous columns."""
    tokens = tm.tokens.reshape(1, tm.h, tm.w, tm.dim)
    out = avgpool_tokens(tokens, tm.mask, g_h, g_w)
    return TokenMap(out.reshape(g_h, g_w, tm.dim), np.ones((g_h, g_w)))
