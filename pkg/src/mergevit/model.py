"""Backbone transformer: merged token grid -> pre-norm attention blocks -> logits.

The pipeline is patch embedding, token merging to the fixed target grid,
positional encoding (jittered in training, exact at inference), a stack of
standard pre-norm self-attention blocks on the constant-size token sequence,
and a mean-pooled linear head. Because merging always lands on the same grid,
block compute is identical for every input resolution.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    AttentionWeights,
    FfnWeights,
    LayerNormWeights,
    ffn_forward,
    maybe_layer_norm,
    project,
    scaled_dot_attention,
)
from .merger import AtmWeights, avgpool_tokens, compute_merge_schedule, merge_tokens
from .patches import Image, patchify_array
from .posenc import PosEmbedGrid, encode_tokens_batch, fuzzy_offsets_batch
from .tensor import Tensor, constant, cross_entropy, layer_norm, matmul, parameter

__all__ = [
    "MODEL_CONFIGS", "BlockWeights", "ModelConfig", "ModelWeights",
    "build_weights", "cross_entropy", "forward", "forward_batch", "get_config",
    "init_weights", "mhsa_block", "named_tensors", "param_count", "with_arrays",
]

FFN_MULT = 4
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    name: str
    patch_size: int
    dim: int
    depth: int
    heads: int
    grid_h: int
    grid_w: int
    num_classes: int
    merger: str = "atm"       # "atm" | "avgpool"
    pe_mode: str = "fpe"      # "fpe" | "ape"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.merger not in ("atm", "avgpool"):
            raise ConfigError(f"unknown merger {self.merger!r}")
        if self.pe_mode not in ("fpe", "ape"):
            raise ConfigError(f"unknown pe_mode {self.pe_mode!r}")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")


MODEL_CONFIGS = {
    "tiny-test": ModelConfig("tiny-test", patch_size=4, dim=8, depth=1, heads=2,
                             grid_h=2, grid_w=2, num_classes=4),
    "toy": ModelConfig("toy", patch_size=8, dim=64, depth=4, heads=4,
                       grid_h=7, grid_w=7, num_classes=8),
    "vitar-s-geom": ModelConfig("vitar-s-geom", patch_size=16, dim=384, depth=12,
                                heads=6, grid_h=14, grid_w=14, num_classes=1000),
    "vitar-b-geom": ModelConfig("vitar-b-geom", patch_size=16, dim=768, depth=12,
                                heads=12, grid_h=14, grid_w=14, num_classes=1000),
}


def get_config(name: str, **overrides) -> ModelConfig:
    if name not in MODEL_CONFIGS:
        raise ConfigError(f"unknown model config {name!r}; "
                          f"choices: {sorted(MODEL_CONFIGS)}")
    cfg = MODEL_CONFIGS[name]
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class BlockWeights:
    ln1: LayerNormWeights | None
    attn: AttentionWeights
    ln2: LayerNormWeights | None
    ffn: FfnWeights
    heads: int


@dataclass
class ModelWeights:
    config: ModelConfig
    patch_w: Tensor
    patch_b: Tensor
    atm: AtmWeights | None
    pos: PosEmbedGrid
    blocks: list[BlockWeights] = field(default_factory=list)
    final_ln: LayerNormWeights | None = None
    head_w: Tensor | None = None
    head_b: Tensor | None = None


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    # Independent stream per tensor so arms that drop a component still draw
    # identical values for every tensor they share.
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def _init_array(seed: int, name: str, shape: tuple[int, ...]) -> np.ndarray:
    tag = name.rsplit(".", 1)[-1]
    if tag in ("gamma",):
        return np.ones(shape)
    if tag in ("beta",) or tag.startswith("b"):
        return np.zeros(shape)
    return _tensor_rng(seed, name).normal(0.0, INIT_STD, size=shape)


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    p = cfg.patch_size * cfg.patch_size * 3
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (p, d), "patch.b": (d,),
    }

    def attn_shapes(prefix):
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{nm}"] = (d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.{nm}"] = (d,)

    def ln_shapes(prefix):
        shapes[f"{prefix}.gamma"] = (d,)
        shapes[f"{prefix}.beta"] = (d,)

    def ffn_shapes(prefix):
        shapes[f"{prefix}.w1"] = (d, FFN_MULT * d)
        shapes[f"{prefix}.b1"] = (FFN_MULT * d,)
        shapes[f"{prefix}.w2"] = (FFN_MULT * d, d)
        shapes[f"{prefix}.b2"] = (d,)

    if cfg.merger == "atm":
        ln_shapes("atm.ln_attn")
        attn_shapes("atm.attn")
        ln_shapes("atm.ln_ffn")
        ffn_shapes("atm.ffn")
    shapes["pos.grid"] = (cfg.grid_h, cfg.grid_w, d)
    for i in range(cfg.depth):
        ln_shapes(f"blocks.{i}.ln1")
        attn_shapes(f"blocks.{i}.attn")
        ln_shapes(f"blocks.{i}.ln2")
        ffn_shapes(f"blocks.{i}.ffn")
    ln_shapes("final_ln")
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def build_weights(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelWeights:
    """Assemble ModelWeights from named arrays; names/shapes must match exactly."""
    shapes = _tensor_shapes(cfg)
    missing = shapes.keys() - arrays.keys()
    extra = arrays.keys() - shapes.keys()
    if missing or extra:
        raise ConfigError(f"tensor names mismatch: missing={sorted(missing)}, "
                          f"extra={sorted(extra)}")
    t: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
        t[name] = parameter(arr)

    def attn(prefix):
        return AttentionWeights(*(t[f"{prefix}.{nm}"] for nm in
                                  ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")))

    def ln(prefix):
        return LayerNormWeights(t[f"{prefix}.gamma"], t[f"{prefix}.beta"])

    def ffn(prefix):
        return FfnWeights(t[f"{prefix}.w1"], t[f"{prefix}.b1"],
                          t[f"{prefix}.w2"], t[f"{prefix}.b2"])

    atm = None
    if cfg.merger == "atm":
        atm = AtmWeights(attn=attn("atm.attn"), ln_attn=ln("atm.ln_attn"),
                         ffn=ffn("atm.ffn"), ln_ffn=ln("atm.ln_ffn"),
                         num_heads=cfg.heads)
    blocks = [BlockWeights(ln1=ln(f"blocks.{i}.ln1"), attn=attn(f"blocks.{i}.attn"),
                           ln2=ln(f"blocks.{i}.ln2"), ffn=ffn(f"blocks.{i}.ffn"),
                           heads=cfg.heads)
              for i in range(cfg.depth)]
    return ModelWeights(
        config=cfg,
        patch_w=t["patch.w"], patch_b=t["patch.b"],
        atm=atm,
        pos=PosEmbedGrid(t["pos.grid"], cfg.grid_h, cfg.grid_w),
        blocks=blocks,
        final_ln=ln("final_ln"),
        head_w=t["head.w"], head_b=t["head.b"],
    )


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Fresh weights; matrices N(0, 0.02), biases zero, norm scales one."""
    shapes = _tensor_shapes(cfg)
    return build_weights(cfg, {n: _init_array(seed, n, s) for n, s in shapes.items()})


def named_tensors(w: ModelWeights) -> dict[str, Tensor]:
    """Canonical name -> Tensor view of all learnable parameters."""
    t: dict[str, Tensor] = {"patch.w": w.patch_w, "patch.b": w.patch_b}

    def put_attn(prefix, a: AttentionWeights):
        for nm in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            t[f"{prefix}.{nm}"] = getattr(a, nm)

    def put_ln(prefix, ln: LayerNormWeights):
        t[f"{prefix}.gamma"] = ln.gamma
        t[f"{prefix}.beta"] = ln.beta

    def put_ffn(prefix, f: FfnWeights):
        t[f"{prefix}.w1"] = f.w1
        t[f"{prefix}.b1"] = f.b1
        t[f"{prefix}.w2"] = f.w2
        t[f"{prefix}.b2"] = f.b2

    if w.atm is not None:
        put_ln("atm.ln_attn", w.atm.ln_attn)
        put_attn("atm.attn", w.atm.attn)
        put_ln("atm.ln_ffn", w.atm.ln_ffn)
        put_ffn("atm.ffn", w.atm.ffn)
    t["pos.grid"] = w.pos.grid
    for i, blk in enumerate(w.blocks):
        put_ln(f"blocks.{i}.ln1", blk.ln1)
        put_attn(f"blocks.{i}.attn", blk.attn)
        put_ln(f"blocks.{i}.ln2", blk.ln2)
        put_ffn(f"blocks.{i}.ffn", blk.ffn)
    put_ln("final_ln", w.final_ln)
    t["head.w"] = w.head_w
    t["head.b"] = w.head_b
    return t


def with_arrays(w: ModelWeights, arrays: dict[str, np.ndarray]) -> ModelWeights:
    """New ModelWeights with replaced parameter values (weights stay immutable)."""
    return build_weights(w.config, arrays)


def param_count(w: ModelWeights) -> int:
    return sum(t.size for t in named_tensors(w).values())


def mhsa_block(x: Tensor, w: BlockWeights) -> Tensor:
    """Pre-norm transformer block: x + MHSA(LN(x)), then + FFN(LN(.)).

    Attention is scaled dot-product per head, softmax((Q K^T)/sqrt(D/heads)) V,
    heads concatenated and output-projected. Accepts [..., N, D].
    """
    if x.shape[-1] != w.attn.wq.shape[0]:
        raise ShapeError(f"token dim {x.shape[-1]} != weight dim {w.attn.wq.shape[0]}")
    h_in = maybe_layer_norm(x, w.ln1)
    q = project(h_in, w.attn.wq, w.attn.bq)
    k = project(h_in, w.attn.wk, w.attn.bk)
    v = project(h_in, w.attn.wv, w.attn.bv)
    attn = scaled_dot_attention(q, k, v, w.heads)
    h = x + project(attn, w.attn.wo, w.attn.bo)
    return ffn_forward(h, w.ffn, w.ln2)


def merge_stage(tokens: Tensor, mask: np.ndarray, w: ModelWeights) -> Tensor:
    """Reduce batched [B, h, w, D] tokens to the target grid via the configured merger."""
    cfg = w.config
    if cfg.merger == "avgpool":
        return avgpool_tokens(tokens, mask, cfg.grid_h, cfg.grid_w)
    schedule = compute_merge_schedule(tokens.shape[1], tokens.shape[2],
                                      cfg.grid_h, cfg.grid_w)
    return merge_tokens(tokens, mask, w.atm, schedule)


def forward_batch(images: np.ndarray, w: ModelWeights, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Logits [B, num_classes] for a batch of same-resolution [B, H, W, 3] images.

    ``mode="train"`` with the jittered encoding draws fresh offsets from
    ``rng``; evaluation always uses the exact encoding and is deterministic.
    """
    cfg = w.config
    patches = patchify_array(np.asarray(images, dtype=np.float64), cfg.patch_size)
    b, h, wd, p = patches.shape
    tokens = (matmul(constant(patches).reshape(b * h * wd, p), w.patch_w)
              + w.patch_b).reshape(b, h, wd, cfg.dim)
    tokens = merge_stage(tokens, np.ones((h, wd)), w)

    if mode == "train" and cfg.pe_mode == "fpe":
        if rng is None:
            raise ConfigError("train mode with jittered encoding needs an rng")
        offsets = fuzzy_offsets_batch(b, cfg.grid_h * cfg.grid_w, rng)
    elif mode in ("train", "eval"):
        offsets = None
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    tokens = encode_tokens_batch(tokens, w.pos, offsets)

    n = cfg.grid_h * cfg.grid_w
    x = tokens.reshape(b, n, cfg.dim)
    for blk in w.blocks:
        x = mhsa_block(x, blk)
    x = layer_norm(x, w.final_ln.gamma, w.final_ln.beta)
    pooled = x.mean(axis=-2)
    return project(pooled, w.head_w, w.head_b)


def forward(img: Image, w: ModelWeights, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Tensor:
    """Logits [num_classes] for a single image; see ``forward_batch``."""
    return forward_batch(img.data[None], w, mode=mode, rng=rng).reshape(
        w.config.num_classes)
