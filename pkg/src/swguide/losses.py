"""The three training losses: classification, distillation, adversarial.

Each loss has a tape-node builder (used inside the training step, so
gradients flow) and a plain eager wrapper returning a float.  The total
objective is their unweighted sum; the trainer may scale individual terms
for ablations, with every weight defaulting to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    EmptyMaskError,
    ShapeMismatchError,
    SingleDomainBatchError,
    UnlabeledError,
)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossReport:
    l_ce: float
    l_kd: float
    l_ad: float
    total: float


def total_loss(l_ce: float, l_kd: float, l_ad: float) -> LossReport:
    return LossReport(
        l_ce=float(l_ce),
        l_kd=float(l_kd),
        l_ad=float(l_ad),
        total=float(l_ce) + float(l_kd) + float(l_ad),
    )


def classification_loss_node(probs: ad.Node, labels, mask) -> ad.Node:
    """Mean −log p[label] over the masked rows (the source-role subset)."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n, k = probs.value.shape
    if labels.shape != (n,) or mask.shape != (n,):
        raise ShapeMismatchError(
            f"labels {labels.shape} / mask {mask.shape} for batch of {n}"
        )
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("classification loss needs at least one masked row")
    weights = np.zeros((n, k))
    for i in np.flatnonzero(mask):
        if labels[i] < 0 or labels[i] >= k:
            raise UnlabeledError(f"masked row {i} has no usable label ({labels[i]})")
        weights[i, labels[i]] = -1.0 / count
    return ad.weighted_sum(ad.log_rows(probs, PROB_FLOOR), weights)


def kd_loss_node(probs: ad.Node, teacher_rows) -> ad.Node:
    """Mean KL(teacher ‖ p) over all rows, both distributions floored.

    The teacher-entropy part is constant in the parameters; it is added
    as a constant node so the reported value is the true divergence.
    """
    teacher = np.asarray(teacher_rows, dtype=np.float64)
    if teacher.shape != probs.value.shape:
        raise ShapeMismatchError(
            f"teacher shape {teacher.shape} != probabilities shape {probs.value.shape}"
        )
    n = teacher.shape[0]
    cross = ad.weighted_sum(ad.log_rows(probs, PROB_FLOOR), -teacher / n)
    entropy = float(np.sum(teacher * np.log(np.maximum(teacher, PROB_FLOOR))) / n)
    return ad.add(cross, probs.tape.leaf([[entropy]]))


def adversarial_loss_node(d_hat: ad.Node, domain_labels) -> ad.Node:
    """Mean BCE of the domain probabilities against 1=source, 0=target."""
    labels = np.asarray(domain_labels, dtype=np.float64).reshape(-1, 1)
    n = d_hat.value.shape[0]
    if labels.shape != (n, 1):
        raise ShapeMismatchError(f"{labels.shape[0]} domain labels for {n} rows")
    if d_hat.value.shape[1] != 1:
        raise ShapeMismatchError(
            f"domain probabilities must be a column, got {d_hat.value.shape}"
        )
    positives = labels.sum()
    if positives == 0 or positives == n:
        raise SingleDomainBatchError(
            "adversarial loss needs both domains in the batch"
        )
    tape = d_hat.tape
    term_pos = ad.weighted_sum(ad.log_rows(d_hat, PROB_FLOOR), -labels / n)
    one_minus = ad.add(tape.leaf(np.ones((n, 1))), ad.scale(d_hat, -1.0))
    term_neg = ad.weighted_sum(ad.log_rows(one_minus, PROB_FLOOR), -(1.0 - labels) / n)
    return ad.add(term_pos, term_neg)


# ---------------------------------------------------------------------------
# Eager wrappers
# ---------------------------------------------------------------------------


def _eager(builder, value, *args) -> float:
    tape = ad.Tape()
    node = builder(tape.leaf(value), *args)
    return float(node.value[0, 0])


def classification_loss(probs, labels, mask) -> float:
    return _eager(classification_loss_node, probs, labels, mask)


def kd_loss(teacher_rows, probs) -> float:
    return _eager(kd_loss_node, probs, teacher_rows)


def adversarial_loss(d_hat, domain_labels) -> float:
    return _eager(adversarial_loss_node, d_hat, domain_labels)
