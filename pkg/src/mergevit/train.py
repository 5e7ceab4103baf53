"""Multi-resolution training on synthetic scenes, evaluation, and ablations.

Every optimization step draws one resolution uniformly from the configured
set and builds the whole batch at that single resolution; supervision is
plain cross-entropy. Evaluation always runs the exact positional encoding.
Given the same config and seed, training is bit-reproducible.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import SyntheticDataset, generate_batch_arrays
from .errors import ConfigError, TrainingDiverged
from .model import (
    ModelWeights,
    cross_entropy,
    forward_batch,
    get_config,
    init_weights,
    named_tensors,
    with_arrays,
)
from .tensor import no_grad

TRAIN_SAMPLES_PER_EPOCH = 2048
HELDOUT_SAMPLES = 256
EVAL_BATCH = 64
# Held-out scenes live far above any reachable training step and are shared
# across resolutions, so per-resolution accuracies are paired comparisons.
HELDOUT_STEP_BASE = 1 << 48


@dataclass(frozen=True)
class TrainConfig:
    train_resolutions: tuple[int, ...] = (56, 80, 112)
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    pe_mode: str = "fpe"
    merger: str = "atm"

    def __post_init__(self):
        if not self.train_resolutions:
            raise ConfigError("train_resolutions must be non-empty")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.pe_mode not in ("fpe", "ape") or self.merger not in ("atm", "avgpool"):
            raise ConfigError("pe_mode must be fpe|ape, merger atm|avgpool")


def load_train_config(path: str) -> TrainConfig:
    """Strict JSON config: keys must be TrainConfig field names exactly."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(TrainConfig)}
    unknown = raw.keys() - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "train_resolutions" in raw:
        raw["train_resolutions"] = tuple(int(r) for r in raw["train_resolutions"])
    return TrainConfig(**raw)


class Adam:
    """Moment-based updates with decoupled weight decay on matrices only."""

    def __init__(self, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p
            out[name] = p - self.lr * update
        return out


def _stream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(zlib.crc32(label.encode()),)))


def evaluate(w: ModelWeights, ds: SyntheticDataset, resolution_px: int,
             n_samples: int = HELDOUT_SAMPLES) -> tuple[float, float]:
    """(accuracy, mean loss) on the held-out split at one resolution."""
    correct = 0
    losses = []
    done = 0
    batch_idx = 0
    with no_grad():
        while done < n_samples:
            n = min(EVAL_BATCH, n_samples - done)
            images, labels = generate_batch_arrays(
                ds, n, resolution_px, HELDOUT_STEP_BASE + batch_idx)
            logits = forward_batch(images, w, mode="eval")
            preds = np.argmax(logits.data, axis=-1)
            correct += int(np.sum(preds == labels))
            losses.append(cross_entropy(logits, labels).item() * n)
            done += n
            batch_idx += 1
    return correct / n_samples, sum(losses) / n_samples


def eval_sweep(w: ModelWeights, ds: SyntheticDataset, resolutions,
               n_samples: int = HELDOUT_SAMPLES) -> list[dict]:
    """One row of (resolution, accuracy, mean loss) per requested resolution."""
    rows = []
    for res in resolutions:
        acc, loss = evaluate(w, ds, res, n_samples)
        rows.append({"resolution": int(res), "accuracy": acc, "loss": loss})
    return rows


def train(cfg: TrainConfig, model: ModelWeights,
          ds: SyntheticDataset | None = None) -> tuple[ModelWeights, list[dict]]:
    """Train in place-free style: returns the final weights and per-epoch log.

    Raises ``TrainingDiverged`` on a non-finite loss.
    """
    if ds is None:
        ds = SyntheticDataset(num_classes=model.config.num_classes, seed=cfg.seed)
    for res in cfg.train_resolutions:
        if res % model.config.patch_size:
            raise ConfigError(
                f"resolution {res} not divisible by patch {model.config.patch_size}")

    opt = Adam(cfg.lr, cfg.weight_decay)
    res_rng = _stream(cfg.seed, "resolution-choice")
    fpe_rng = _stream(cfg.seed, "pos-jitter")
    steps_per_epoch = math.ceil(TRAIN_SAMPLES_PER_EPOCH / cfg.batch_size)
    resolutions = tuple(cfg.train_resolutions)

    w = model
    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            res = int(resolutions[res_rng.integers(len(resolutions))])
            images, labels = generate_batch_arrays(ds, cfg.batch_size, res, step)
            # Contract: one resolution per batch, never mixed.
            assert images.shape[1] == images.shape[2] == res

            logits = forward_batch(images, w, mode="train", rng=fpe_rng)
            loss = cross_entropy(logits, labels)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"loss became {loss_val} at step {step}")
            epoch_losses.append(loss_val)

            loss.backward()
            tensors = named_tensors(w)
            params = {n: np.asarray(t.data) for n, t in tensors.items()}
            grads = {n: t.grad if t.grad is not None else np.zeros_like(t.data)
                     for n, t in tensors.items()}
            w = with_arrays(w, opt.step(params, grads))
            step += 1

        heldout = {res: evaluate(w, ds, res) for res in resolutions}
        log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "heldout": {res: {"accuracy": acc, "loss": lo}
                        for res, (acc, lo) in heldout.items()},
        })
    return w, log


def _arm_configs(kind: str, base: TrainConfig) -> tuple[TrainConfig, TrainConfig, str, str]:
    if kind == "pe":
        return (replace(base, pe_mode="fpe"), replace(base, pe_mode="ape"),
                "fpe", "ape")
    if kind == "merger":
        return (replace(base, merger="atm"), replace(base, merger="avgpool"),
                "atm", "avgpool")
    raise ConfigError(f"unknown ablation kind {kind!r}; use 'merger' or 'pe'")


@dataclass
class AblationReport:
    kind: str
    arm_a: str
    arm_b: str
    rows: list[dict] = field(default_factory=list)

    def deltas_at(self, resolution: int) -> list[float]:
        return [r["acc_a"] - r["acc_b"] for r in self.rows
                if r["resolution"] == resolution]

    def wins_at(self, resolution: int) -> int:
        """Seeds where arm A is at least as accurate as arm B."""
        return sum(1 for r in self.rows
                   if r["resolution"] == resolution and r["acc_a"] >= r["acc_b"])


def train_arm(cfg: TrainConfig, model_name: str = "toy") -> tuple[ModelWeights, list[dict]]:
    """Init and train one model matching the train config's arm settings."""
    mcfg = get_config(model_name, merger=cfg.merger, pe_mode=cfg.pe_mode)
    weights = init_weights(mcfg, cfg.seed)
    return train(cfg, weights)


def run_ablation(kind: str, base_cfg: TrainConfig, seeds,
                 eval_resolutions=None, model_name: str = "toy") -> AblationReport:
    """Train paired arms per seed and compare accuracy per resolution.

    Arms share identical initial values for every tensor they both have
    (initialization streams are keyed by tensor name). ``eval_resolutions``
    defaults to the trained set plus one unseen resolution at 1.5x the max.
    """
    cfg_a, cfg_b, name_a, name_b = _arm_configs(kind, base_cfg)
    if eval_resolutions is None:
        top = max(base_cfg.train_resolutions)
        eval_resolutions = list(base_cfg.train_resolutions) + [top * 3 // 2]
    report = AblationReport(kind=kind, arm_a=name_a, arm_b=name_b)
    for seed in seeds:
        wa, _ = train_arm(replace(cfg_a, seed=seed), model_name)
        wb, _ = train_arm(replace(cfg_b, seed=seed), model_name)
        ds = SyntheticDataset(num_classes=wa.config.num_classes, seed=seed)
        rows_a = eval_sweep(wa, ds, eval_resolutions)
        rows_b = eval_sweep(wb, ds, eval_resolutions)
        for ra, rb in zip(rows_a, rows_b):
            report.rows.append({
                "seed": int(seed),
                "resolution": ra["resolution"],
                "acc_a": ra["accuracy"],
                "acc_b": rb["accuracy"],
            })
    return report
