"""Learnable positional grid with jittered sampling at train time.

During training each token reads the positional table at its own coordinates
plus a fresh uniform offset in [-0.5, 0.5]^2, so the model never sees one
fixed embedding per site. At inference the table is read exactly, resized
with align-corners bilinear interpolation if the token grid differs from the
trained one. Because sampling needs nothing beyond per-token coordinates, the
encoding applies unchanged to arbitrary token subsets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .patches import TokenMap
from .tensor import Tensor, bilinear_sample


@dataclass
class PosEmbedGrid:
    """Learnable [g_h, g_w, D] positional table and its training-time dims."""

    grid: Tensor
    trained_gh: int
    trained_gw: int

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ShapeError(f"positional grid must be [g_h, g_w, D], got {self.grid.shape}")
        if self.grid.shape[:2] != (self.trained_gh, self.trained_gw):
            raise ShapeError("trained dims disagree with grid shape")


def sample_offsets(n: int, rng_seed: int) -> np.ndarray:
    """Draw n i.i.d. offset pairs, each coordinate uniform on [-0.5, 0.5].

    Deterministic for a given seed; returns an [n, 2] array.
    """
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(-0.5, 0.5, size=(n, 2))


def _lattice_coords(h: int, w: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=-1)


def fuzzy_encode(tm: TokenMap, pe: PosEmbedGrid, rng_seed: int,
                 offsets: np.ndarray | None = None,
                 per_token: bool = True) -> TokenMap:
    """Add the positional table sampled at jittered coordinates (i+s1, j+s2).

    Offsets are drawn fresh per token per call (``per_token=False`` shares one
    pair across the map). ``offsets`` overrides sampling entirely; an all-zero
    array reproduces ``exact_encode`` bit for bit at native dims.
    """
    if (tm.h, tm.w) != (pe.trained_gh, pe.trained_gw):
        raise ShapeError(
            f"token grid {tm.h}x{tm.w} does not match positional grid "
            f"{pe.trained_gh}x{pe.trained_gw}")
    n = tm.h * tm.w
    if offsets is None:
        offsets = sample_offsets(n if per_token else 1, rng_seed)
        if not per_token:
            offsets = np.broadcast_to(offsets, (n, 2))
    offsets = np.asarray(offsets, dtype=np.float64).reshape(n, 2)
    coords = _lattice_coords(tm.h, tm.w) + offsets
    sampled = bilinear_sample(pe.grid, coords)
    tokens = tm.tokens + sampled.reshape(tm.h, tm.w, tm.dim)
    return TokenMap(tokens, tm.mask.copy())


def resize_grid(pe: PosEmbedGrid, h: int, w: int) -> Tensor:
    """Align-corners bilinear resize of the positional table to [h, w, D]."""
    gh, gw, _ = pe.grid.shape

    def axis_coords(n_out, n_src):
        if n_out == 1:
            return np.full(1, (n_src - 1) / 2.0)
        return np.arange(n_out, dtype=np.float64) * (n_src - 1) / (n_out - 1)

    ys = axis_coords(h, gh)
    xs = axis_coords(w, gw)
    ii, jj = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel()], axis=-1)
    return bilinear_sample(pe.grid, coords).reshape(h, w, pe.grid.shape[-1])


def exact_encode(tm: TokenMap, pe: PosEmbedGrid) -> TokenMap:
    """Add the positional table exactly, resizing first if the dims differ.

    At native dims the interpolation degenerates to the identity and the
    stored table is added as-is.
    """
    if (tm.h, tm.w) == (pe.trained_gh, pe.trained_gw):
        added = pe.grid
    else:
        added = resize_grid(pe, tm.h, tm.w)
    return TokenMap(tm.tokens + added, tm.mask.copy())


def encode_subset(tokens: Tensor, coords: Sequence[tuple[float, float]],
                  pe: PosEmbedGrid, mode: str = "exact",
                  rng_seed: int | None = None) -> Tensor:
    """Positionally encode an arbitrary unordered token subset.

    ``coords`` are positions on the trained grid. In exact mode each token
    receives precisely what the full-grid encoding would give it at that
    coordinate; fuzzy mode jitters each coordinate independently using
    ``rng_seed``. No spatial neighborhood structure is needed, so any subset
    (e.g. the visible tokens of a masked autoencoder) works.
    """
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if tokens.ndim != 2 or tokens.shape[0] != c.shape[0]:
        raise ShapeError(
            f"tokens {tokens.shape} do not match {c.shape[0]} coordinates")
    if mode == "fuzzy":
        if rng_seed is None:
            raise ShapeError("fuzzy mode needs rng_seed")
        c = c + sample_offsets(c.shape[0], rng_seed)
    elif mode != "exact":
        raise ShapeError(f"unknown mode {mode!r}")
    return tokens + bilinear_sample(pe.grid, c)


def fuzzy_offsets_batch(b: int, n: int, rng: np.random.Generator,
                        per_token: bool = True) -> np.ndarray:
    """[B, n, 2] training offsets from an existing generator (one batch draw)."""
    if per_token:
        return rng.uniform(-0.5, 0.5, size=(b, n, 2))
    shared = rng.uniform(-0.5, 0.5, size=(b, 1, 2))
    return np.broadcast_to(shared, (b, n, 2)).copy()


def encode_tokens_batch(tokens: Tensor, pe: PosEmbedGrid,
                        offsets: np.ndarray | None) -> Tensor:
    """Add positional embeddings to batched [B, g_h, g_w, D] tokens.

    ``offsets`` is [B, n, 2] for jittered sampling or None for the exact path.
    Token dims must already equal the trained grid.
    """
    b, h, w, d = tokens.shape
    if (h, w) != (pe.trained_gh, pe.trained_gw):
        raise ShapeError("batched encoding requires native grid dims")
    if offsets is None:
        return tokens + pe.grid
    n = h * w
    coords = _lattice_coords(h, w)[None, :, :] + offsets
    sampled = bilinear_sample(pe.grid, coords.reshape(b * n, 2))
    return tokens + sampled.reshape(b, h, w, d)
