"""Analytic compute model for the merging transformer and a plain-ViT baseline.

Counting conventions, pinned so the numbers are comparable with the compute
figures commonly reported for vision transformers:

- a linear projection of N tokens from d_in to d_out counts N*d_in*d_out
  multiply-accumulates (one MAC = one FLOP, the convention used by standard
  profilers for published model tables);
- attention contributes Nq*Nk*D MACs for scores plus the same for the
  weighted sum, all heads combined;
- softmax and layer norm count 5 ops per element;
- bias additions, residual adds, and mean pooling are omitted as negligible.

The baseline model removes merging entirely: every patch token traverses
every block, so its attention term grows quadratically with token count
while the merged model's block cost stays constant.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .merger import MergeSchedule, compute_merge_schedule
from .model import FFN_MULT, ModelConfig

NORM_OPS = 5
SOFTMAX_OPS = 5


@dataclass(frozen=True)
class FlopsReport:
    resolution_px: int
    tokens_in: int
    schedule: MergeSchedule | None
    flops_patch: float
    flops_atm: float
    flops_backbone: float

    @property
    def flops_total(self) -> float:
        return self.flops_patch + self.flops_atm + self.flops_backbone

    @property
    def schedule_len(self) -> int:
        return len(self.schedule.steps) if self.schedule is not None else 0


def _tokens(cfg: ModelConfig, resolution_px: int) -> tuple[int, int]:
    if resolution_px % cfg.patch_size:
        raise ShapeError(
            f"resolution {resolution_px} not divisible by patch {cfg.patch_size}")
    n = resolution_px // cfg.patch_size
    return n, n


def _patch_flops(cfg: ModelConfig, n_tokens: int) -> float:
    return n_tokens * (cfg.patch_size ** 2 * 3) * cfg.dim


def _block_flops(cfg: ModelConfig, n: int) -> float:
    d, heads = cfg.dim, cfg.heads
    qkvo = 4 * n * d * d
    attn = 2 * n * n * d
    ffn = 2 * FFN_MULT * n * d * d
    norms = 2 * n * d * NORM_OPS
    softmax = heads * n * n * SOFTMAX_OPS
    return qkvo + attn + ffn + norms + softmax


def _backbone_flops(cfg: ModelConfig, n: int) -> float:
    head = cfg.dim * cfg.num_classes
    final_norm = n * cfg.dim * NORM_OPS
    return cfg.depth * _block_flops(cfg, n) + final_norm + head


def _merge_step_flops(cfg: ModelConfig, n_in: int, n_out: int, r: int) -> float:
    d, heads = cfg.dim, cfg.heads
    kv = 2 * n_in * d * d
    q_out = 2 * n_out * d * d
    attn = 2 * n_out * r * d
    ffn = 2 * FFN_MULT * n_out * d * d
    norms = (n_in + 2 * n_out) * d * NORM_OPS
    softmax = heads * n_out * r * SOFTMAX_OPS
    return kv + q_out + attn + ffn + norms + softmax


def flops_estimate(cfg: ModelConfig, resolution_px: int) -> FlopsReport:
    """Compute cost of the merging model at one input resolution.

    Merge steps are charged at their padded token counts, matching what the
    implementation actually evaluates.
    """
    h, w = _tokens(cfg, resolution_px)
    schedule = compute_merge_schedule(h, w, cfg.grid_h, cfg.grid_w)
    atm = 0.0
    for spec in schedule.steps:
        n_in = spec.padded_h * spec.padded_w
        n_out = spec.g_th * spec.g_tw
        atm += _merge_step_flops(cfg, n_in, n_out, spec.r_h * spec.r_w)
    return FlopsReport(
        resolution_px=resolution_px,
        tokens_in=h * w,
        schedule=schedule,
        flops_patch=_patch_flops(cfg, h * w),
        flops_atm=atm,
        flops_backbone=_backbone_flops(cfg, cfg.grid_h * cfg.grid_w),
    )


def flops_vit_baseline(cfg: ModelConfig, resolution_px: int) -> FlopsReport:
    """Same counting with merging removed: all tokens traverse every block."""
    h, w = _tokens(cfg, resolution_px)
    n = h * w
    return FlopsReport(
        resolution_px=resolution_px,
        tokens_in=n,
        schedule=None,
        flops_patch=_patch_flops(cfg, n),
        flops_atm=0.0,
        flops_backbone=_backbone_flops(cfg, n),
    )
