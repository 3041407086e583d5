"""Training losses: per-slot cross-entropy, group InfoNCE, and their weighted sum.

InfoNCE treats each slot's pooled composite-path output as a query, its own
one-by-one teacher output as the positive, and the other slots' teacher
outputs as negatives. Similarity is the raw dot product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _group_infonce(student: Tensor, teacher: Tensor, temperature: float) -> Tensor:
    """Sum over slots of -log softmax(ĥ_k·h_j / τ)[k] for one [N, d] group."""
    sims = T.matmul(student, T.swap_axes(teacher, 0, 1))
    if temperature != 1.0:
        sims = T.scale(sims, 1.0 / temperature)
    n = sims.shape[0]
    eye = Tensor(np.eye(n, dtype=sims.data.dtype))
    positives = T.sum_over_axis(T.sum_over_axis(T.mul(sims, eye), 1), 0)
    lse = T.sum_over_axis(T.logsumexp_last(sims), 0)
    return T.sub(lse, positives)


def infonce_loss(student: Tensor, teacher: Tensor, temperature: float = 1.0) -> Tensor:
    """Contrastive alignment loss over one group [N, d] or a batch [B, N, d].

    For a batch the per-group sums are averaged over the B groups. Requires
    N >= 2: a single slot has no negatives.
    """
    if student.shape != teacher.shape:
        raise T.ShapeError(f"student {student.shape} vs teacher {teacher.shape}")
    if student.data.ndim == 2:
        if student.shape[0] < 2:
            raise ValueError("InfoNCE needs at least 2 slots per group")
        return _group_infonce(student, teacher, temperature)
    if student.data.ndim == 3:
        batch, n, _ = student.shape
        if n < 2:
            raise ValueError("InfoNCE needs at least 2 slots per group")
        sims = T.matmul(student, T.swap_axes(teacher, 1, 2))
        if temperature != 1.0:
            sims = T.scale(sims, 1.0 / temperature)
        eye = Tensor(np.eye(n, dtype=sims.data.dtype))
        positives = T.sum_over_axis(T.mul(sims, eye), 2)
        per_group = T.sum_over_axis(T.sub(T.logsumexp_last(sims), positives), 1)
        return T.scale(T.sum_over_axis(per_group, 0), 1.0 / batch)
    raise T.ShapeError(f"expected [N, d] or [B, N, d], got {student.shape}")


@dataclass
class LossBreakdown:
    """The three scalars logged every step and the weight tying them."""

    ce: Tensor
    infonce: Tensor
    total: Tensor
    weight: float


def combined_loss(
    logits_per_slot: list[Tensor],
    labels_per_slot: list[np.ndarray],
    student: Tensor,
    teacher: Tensor,
    weight: float = 0.5,
    temperature: float = 1.0,
) -> LossBreakdown:
    """ce averaged over the recovered slots plus weight times InfoNCE."""
    if weight < 0:
        raise ValueError(f"loss weight must be >= 0, got {weight}")
    if len(logits_per_slot) != len(labels_per_slot):
        raise ValueError("one label vector per slot required")
    ce = None
    for logits, labels in zip(logits_per_slot, labels_per_slot):
        slot_ce = T.softmax_cross_entropy(logits, labels)
        ce = slot_ce if ce is None else T.add(ce, slot_ce)
    ce = T.scale(ce, 1.0 / len(logits_per_slot))
    infonce = infonce_loss(student, teacher, temperature)
    total = T.add(ce, T.scale(infonce, weight))
    return LossBreakdown(ce=ce, infonce=infonce, total=total, weight=weight)
