"""Joint training loop: SGD with momentum, warmup + cosine decay.

Three variants share the loop. ``baseline`` minimizes cross-entropy on
raw inputs; ``jt`` adds the swapped-prediction loss on augmented view
pairs; ``jt-ent`` additionally regularizes prototype prediction entropy.
Prototypes are renormalized to the unit sphere after every step and are
excluded from weight decay (decay would be undone by the renormalization).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .augment import TransformSpec, sample_view_batch
from .data import SPLIT_TRAIN, SPLIT_VAL, Dataset
from .losses import TemperaturePair, TrainBatch, joint_training_loss, supervised_loss
from .model import ModelConfig, ModelParams, PrototypeBank, init_model
from .ot_codes import SinkhornSettings

log = logging.getLogger(__name__)

VARIANT_BASELINE = "baseline"
VARIANT_JT = "jt"
VARIANT_JT_ENT = "jt-ent"
VARIANTS = (VARIANT_BASELINE, VARIANT_JT, VARIANT_JT_ENT)

METRICS_COLUMNS = ("epoch", "lr", "l_swav", "l_ce", "l_ent", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    base_lr: float = 0.1
    lr_floor: float = 0.0
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-5
    tau: float = 0.1
    epsilon: float = 0.05
    gamma1: float = 0.3
    gamma2: float = 0.1
    sinkhorn_iterations: int = 3
    variant: str = VARIANT_JT_ENT
    seed: int = 0
    num_prototypes: int = 30
    prototype_momentum: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        for name in ("epochs", "batch_size", "sinkhorn_iterations", "num_prototypes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("base_lr", "tau", "epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr_floor", "warmup_epochs", "momentum", "weight_decay", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def temps(self) -> TemperaturePair:
        return TemperaturePair(tau=self.tau, epsilon=self.epsilon)

    def sinkhorn(self) -> SinkhornSettings:
        return SinkhornSettings(epsilon=self.epsilon, iterations=self.sinkhorn_iterations)


@dataclass
class TrainReport:
    variant: str
    seed: int
    lr_trace: list[float] = field(default_factory=list)
    l_swav: list[float] = field(default_factory=list)
    l_ce: list[float] = field(default_factory=list)
    l_ent: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    checkpoint_path: str = ""
    config_hash: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
            for e in range(len(self.lr_trace)):
                writer.writerow([e, repr(self.lr_trace[e]), repr(self.l_swav[e]),
                                 repr(self.l_ce[e]), repr(self.l_ent[e]), repr(self.val_acc[e])])


def lr_schedule(step: int, total_steps: int, config: TrainConfig,
                steps_per_epoch: int = 1) -> float:
    """Learning rate at a global step: linear ramp from 0 over the warmup
    (hits base_lr exactly at the warmup boundary), then cosine decay down
    to the floor at the final step.
    """
    if not 0 <= step < total_steps:
        raise ValueError("step out of range")
    warmup_steps = config.warmup_epochs * steps_per_epoch
    if warmup_steps > 0 and step < warmup_steps:
        return config.base_lr * step / warmup_steps
    last = total_steps - 1
    if last == warmup_steps:
        return config.base_lr
    progress = (step - warmup_steps) / (last - warmup_steps)
    return config.lr_floor + (config.base_lr - config.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class SgdState:
    """Momentum buffers plus decay filtering for model blocks and prototypes.

    Weight decay applies only to weight matrices (block ids whose leaf
    name starts with "W"); biases, normalization affines and prototypes
    are not decayed. Buffers start at zero.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.velocity: dict[str, np.ndarray] = {}

    def _buf(self, key: str, like: np.ndarray) -> np.ndarray:
        if key not in self.velocity:
            self.velocity[key] = np.zeros_like(like)
        return self.velocity[key]

    def step(self, model: ModelParams, prototypes: PrototypeBank | None,
             grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.config
        for bid, grad in grads.items():
            if bid == "prototypes":
                continue
            g = grad
            if cfg.weight_decay > 0 and bid.rsplit(".", 1)[-1].startswith("W"):
                g = g + cfg.weight_decay * model[bid]
            buf = self._buf(bid, g)
            buf *= cfg.momentum
            buf += g
            model.apply_update(bid, -lr * buf)
        if prototypes is not None and "prototypes" in grads:
            g = grads["prototypes"]
            if cfg.prototype_momentum:
                buf = self._buf("prototypes", g)
                buf *= cfg.momentum
                buf += g
                g = buf
            prototypes.values -= lr * g
            prototypes.renormalize()


def evaluate_accuracy(model: ModelParams, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy on raw (unaugmented) row-major inputs."""
    preds = model_mod.predict(model, inputs.T)
    return float(np.mean(preds == labels))


def _batch_loss(variant: str, view_s, view_t, raw, labels, model, prototypes, config: TrainConfig):
    if variant == VARIANT_BASELINE:
        return supervised_loss(raw, labels, model)
    gamma2 = config.gamma2 if variant == VARIANT_JT_ENT else 0.0
    batch = TrainBatch(view_s=view_s, view_t=view_t, labels=labels)
    return joint_training_loss(batch, model, prototypes, config.temps(),
                               config.gamma1, gamma2, config.sinkhorn())


def train_epoch(model: ModelParams, prototypes: PrototypeBank, dataset: Dataset,
                config: TrainConfig, transform: TransformSpec, optimizer: SgdState,
                epoch: int, total_steps: int, steps_per_epoch: int) -> dict[str, float]:
    """One shuffled pass of minibatch SGD; returns mean loss components.

    The shuffle and every augmentation draw are keyed by (seed, epoch,
    sample index), so an epoch's data order and views are reproducible in
    isolation.
    """
    train_idx = np.flatnonzero(dataset.split == SPLIT_TRAIN)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x5481FF1E, epoch)))
    order = shuffle_rng.permutation(train_idx)
    sums: dict[str, float] = {}
    n_batches = 0
    for b_start in range(0, len(order) - config.batch_size + 1, config.batch_size):
        idx = order[b_start : b_start + config.batch_size]
        raw = dataset.inputs[idx].T
        labels = dataset.labels[idx]
        if config.variant == VARIANT_BASELINE:
            view_s = view_t = None
        else:
            view_s, view_t = sample_view_batch(dataset.inputs[idx], transform,
                                               transform.seed, epoch, idx)
        step = epoch * steps_per_epoch + n_batches
        lr = lr_schedule(step, total_steps, config, steps_per_epoch)
        try:
            loss = _batch_loss(config.variant, view_s, view_t, raw, labels,
                               model, prototypes, config)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"non-finite loss at epoch {epoch} batch {n_batches}; "
                f"batch indices {idx.tolist()}, input range "
                f"[{raw.min():.4g}, {raw.max():.4g}]"
            ) from exc
        optimizer.step(model, prototypes if config.variant != VARIANT_BASELINE else None,
                       loss.gradients, lr)
        for key, val in loss.components.items():
            sums[key] = sums.get(key, 0.0) + val
        n_batches += 1
    if n_batches == 0:
        raise ValueError("training split smaller than one batch")
    out = {key: val / n_batches for key, val in sums.items()}
    out["lr_first"] = lr_schedule(epoch * steps_per_epoch, total_steps, config, steps_per_epoch)
    return out


def fit(config: TrainConfig, dataset: Dataset, model_config: ModelConfig,
        transform: TransformSpec, checkpoint_path=None, metrics_path=None,
        config_hash: str = "") -> tuple[ModelParams, PrototypeBank, TrainReport]:
    """Full training run; optionally writes a checkpoint and a metrics CSV."""
    model = init_model(model_config, seed=config.seed)
    prototypes = PrototypeBank.random(model_config.proj_dim, config.num_prototypes,
                                      seed=config.seed)
    optimizer = SgdState(config)
    n_train = int(np.sum(dataset.split == SPLIT_TRAIN))
    steps_per_epoch = n_train // config.batch_size
    if steps_per_epoch < 1:
        raise ValueError("training split smaller than one batch")
    total_steps = config.epochs * steps_per_epoch

    val_mask = dataset.split == SPLIT_VAL
    val_inputs, val_labels = dataset.inputs[val_mask], dataset.labels[val_mask]
    report = TrainReport(variant=config.variant, seed=config.seed, config_hash=config_hash)
    for epoch in range(config.epochs):
        metrics = train_epoch(model, prototypes, dataset, config, transform,
                              optimizer, epoch, total_steps, steps_per_epoch)
        acc = evaluate_accuracy(model, val_inputs, val_labels)
        report.lr_trace.append(metrics["lr_first"])
        report.l_swav.append(metrics.get("l_swav", 0.0))
        report.l_ce.append(metrics.get("l_ce", 0.0))
        report.l_ent.append(metrics.get("l_ent", 0.0))
        report.val_acc.append(acc)
        log.debug("variant=%s seed=%d epoch=%d val_acc=%.4f", config.variant,
                  config.seed, epoch, acc)

    if checkpoint_path is not None:
        model_mod.save_checkpoint(checkpoint_path, model, prototypes, config_hash,
                                  extra={"variant": config.variant, "seed": config.seed})
        report.checkpoint_path = str(checkpoint_path)
    if metrics_path is not None:
        report.write_csv(metrics_path)
    return model, prototypes, report
