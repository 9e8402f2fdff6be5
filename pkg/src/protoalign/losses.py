"""Training and test objectives with analytic gradients.

Codes are always treated as constants: no gradient flows through the
assignment solve, matching the stop-gradient convention of swapped
prediction training. Entropies use natural logarithms and probabilities
are floored at 1e-12 before any log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .model import BACKBONE_ROLES, ModelParams, ProjectionBatch, PrototypeBank
from .ot_codes import (
    CodeMatrix,
    ScoreMatrix,
    SinkhornSettings,
    as_assignment_distributions,
    score_matrix,
    sinkhorn_codes,
    test_codes,
)

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TemperaturePair:
    """tau scales prediction softmaxes, epsilon smooths code assignment."""

    tau: float
    epsilon: float

    def __post_init__(self):
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class LossValue:
    value: float
    gradients: dict[str, np.ndarray]
    components: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError("loss value is not finite")
        for key, grad in self.gradients.items():
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"gradient for {key} is not finite")


@dataclass(frozen=True)
class TrainBatch:
    view_s: np.ndarray
    view_t: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class TestViews:
    view_s: np.ndarray
    view_t: np.ndarray


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=0, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))


def _entropy_cols(p: np.ndarray) -> np.ndarray:
    return -np.sum(p * np.log(np.maximum(p, _PROB_FLOOR)), axis=0)


def swapped_prediction_loss(z_s: ProjectionBatch, z_t: ProjectionBatch,
                            q_s: CodeMatrix, q_t: CodeMatrix,
                            prototypes: PrototypeBank, tau: float) -> LossValue:
    """Cross-entropy of each view's prototype softmax against the other
    view's codes, averaged over the batch and summed over both directions.

    Gradients are returned for the two projection batches ("z_s", "z_t")
    and for the prototype bank ("prototypes"); codes are constants.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    c = prototypes.values
    zs, zt = z_s.values, z_t.values
    if zs.shape != zt.shape:
        raise ValueError(f"view shapes differ: {zs.shape} vs {zt.shape}")
    if c.shape[0] != zs.shape[0]:
        raise ValueError("prototype and projection dimensions differ")
    qs = as_assignment_distributions(q_s)
    qt = as_assignment_distributions(q_t)
    if qs.shape != (c.shape[1], zs.shape[1]) or qt.shape != qs.shape:
        raise ValueError("code shapes inconsistent with prototypes/batch")
    batch = zs.shape[1]

    logit_s = c.T @ zs / tau
    logit_t = c.T @ zt / tau
    log_p_s = _log_softmax(logit_s)
    log_p_t = _log_softmax(logit_t)
    value = float(-np.sum(qs * log_p_t + qt * log_p_s) / batch)

    p_s = np.exp(log_p_s)
    p_t = np.exp(log_p_t)
    dlogit_t = (p_t - qs) / batch
    dlogit_s = (p_s - qt) / batch
    grad_zs = c @ dlogit_s / tau
    grad_zt = c @ dlogit_t / tau
    grad_c = (zs @ dlogit_s.T + zt @ dlogit_t.T) / tau
    return LossValue(value=value,
                     gradients={"z_s": grad_zs, "z_t": grad_zt, "prototypes": grad_c})


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean negative log-likelihood of the true class; gradient on logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    num_classes, batch = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels must have shape ({batch},)")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range for {num_classes} classes")
    log_p = _log_softmax(logits)
    value = float(-np.mean(log_p[labels, np.arange(batch)]))
    grad = np.exp(log_p)
    grad[labels, np.arange(batch)] -= 1.0
    grad /= batch
    return LossValue(value=value, gradients={"logits": grad})


def prototype_entropy_loss(prototypes: PrototypeBank, model: ModelParams) -> LossValue:
    """Mean per-prototype prediction entropy minus marginal prediction entropy.

    Pushing this down makes each prototype commit to one class while the
    prototype population stays spread over all classes. Gradients cover
    the prototypes and the classifier head parameters.
    """
    c = prototypes.values
    logits = model_mod.classifier_forward(model, c)
    log_p = _log_softmax(logits)
    p = np.exp(log_p)
    k = c.shape[1]
    p_bar = p.mean(axis=1)
    mean_ent = float(np.mean(_entropy_cols(p)))
    marginal_ent = float(-np.sum(p_bar * np.log(np.maximum(p_bar, _PROB_FLOOR))))
    value = mean_ent - marginal_ent

    a = np.log(np.maximum(p_bar, _PROB_FLOOR))[:, None] - np.log(np.maximum(p, _PROB_FLOOR))
    dlogits = (p * a - p * np.sum(p * a, axis=0, keepdims=True)) / k
    grad_c, grad_w, grad_b = model_mod.classifier_backward(model, c, dlogits)
    return LossValue(value=value,
                     gradients={"prototypes": grad_c, "head.W": grad_w, "head.b": grad_b})


def joint_training_loss(batch: TrainBatch, model: ModelParams, prototypes: PrototypeBank,
                        temps: TemperaturePair, gamma1: float, gamma2: float,
                        sinkhorn: SinkhornSettings | None = None) -> LossValue:
    """Swapped-prediction loss plus weighted cross-entropy and prototype
    entropy regularization, with per-term gradient routing: the swapped
    term reaches backbone/projection and prototypes, cross-entropy reaches
    backbone/projection and the classifier, the entropy term reaches
    prototypes and the classifier only.
    """
    if gamma1 < 0 or gamma2 < 0:
        raise ValueError("loss weights must be nonnegative")
    if sinkhorn is None:
        sinkhorn = SinkhornSettings(epsilon=temps.epsilon)
    z_s, logits_s, tape_s = model_mod.forward(model, batch.view_s, source="s")
    z_t, _, tape_t = model_mod.forward(model, batch.view_t, source="t")
    q_s = sinkhorn_codes(score_matrix(prototypes, z_s), sinkhorn)
    q_t = sinkhorn_codes(score_matrix(prototypes, z_t), sinkhorn)

    swav = swapped_prediction_loss(z_s, z_t, q_s, q_t, prototypes, temps.tau)
    ce = cross_entropy_loss(logits_s, batch.labels)
    ent = prototype_entropy_loss(prototypes, model)

    grads_s = model_mod.backward(model, tape_s,
                                 d_projections=swav.gradients["z_s"],
                                 d_logits=gamma1 * ce.gradients["logits"])
    grads_t = model_mod.backward(model, tape_t, d_projections=swav.gradients["z_t"])
    total: dict[str, np.ndarray] = {}
    for grads in (grads_s, grads_t):
        for bid, g in grads.items():
            total[bid] = total.get(bid, 0.0) + g
    total["prototypes"] = swav.gradients["prototypes"] + gamma2 * ent.gradients["prototypes"]
    total["head.W"] = total.get("head.W", 0.0) + gamma2 * ent.gradients["head.W"]
    total["head.b"] = total.get("head.b", 0.0) + gamma2 * ent.gradients["head.b"]

    value = swav.value + gamma1 * ce.value + gamma2 * ent.value
    return LossValue(value=value, gradients=total,
                     components={"l_swav": swav.value, "l_ce": ce.value, "l_ent": ent.value})


def supervised_loss(inputs: np.ndarray, labels: np.ndarray, model: ModelParams) -> LossValue:
    """Plain cross-entropy through the full stack (baseline training)."""
    _, logits, tape = model_mod.forward(model, inputs)
    ce = cross_entropy_loss(logits, labels)
    grads = model_mod.backward(model, tape, d_logits=ce.gradients["logits"])
    return LossValue(value=ce.value, gradients=grads, components={"l_ce": ce.value})


def swav_test_loss(views: TestViews, model: ModelParams, prototypes: PrototypeBank,
                   temps: TemperaturePair, grad_blocks=None) -> LossValue:
    """Swapped-prediction loss over augmented copies of one sample, with
    codes from the relaxed (column-only) polytope.

    Gradients are restricted to backbone blocks; the classifier head and
    the prototypes are frozen by contract and may not be requested.
    """
    if grad_blocks is None:
        grad_blocks = model.block_ids(BACKBONE_ROLES)
    else:
        grad_blocks = list(grad_blocks)
        for bid in grad_blocks:
            if bid == "prototypes" or bid not in model.blocks:
                raise ValueError(f"gradients for {bid!r} are not available in the test loss")
            if model.role_of(bid) not in BACKBONE_ROLES:
                raise ValueError(f"block {bid!r} is outside the adaptable backbone scope")
    z_s, _, tape_s = model_mod.forward(model, views.view_s, source="s")
    z_t, _, tape_t = model_mod.forward(model, views.view_t, source="t")
    q_s = test_codes(score_matrix(prototypes, z_s), temps.epsilon)
    q_t = test_codes(score_matrix(prototypes, z_t), temps.epsilon)
    swav = swapped_prediction_loss(z_s, z_t, q_s, q_t, prototypes, temps.tau)
    grads_s = model_mod.backward(model, tape_s, d_projections=swav.gradients["z_s"],
                                 blocks=grad_blocks)
    grads_t = model_mod.backward(model, tape_t, d_projections=swav.gradients["z_t"],
                                 blocks=grad_blocks)
    total = {bid: grads_s[bid] + grads_t[bid] for bid in grads_s}
    return LossValue(value=swav.value, gradients=total,
                     components={"l_swav_test": swav.value})
