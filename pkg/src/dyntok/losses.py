"""Training objective: classification, token distillation, KL to teacher, keep-ratio MSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dyntok import tensor as T
from dyntok.tensor import Tensor

PROB_FLOOR = 1e-9


@dataclass(frozen=True)
class LossWeights:
    lambda_kl: float = 0.5
    lambda_distill: float = 0.5
    lambda_ratio: float = 2.0

    def __post_init__(self):
        if min(self.lambda_kl, self.lambda_distill, self.lambda_ratio) < 0:
            raise ValueError("loss weights must be non-negative")


def cls_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = probs.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    picked = probs[np.arange(b), labels]
    return T.mul(T.mean(T.log(T.clamp_min(picked, PROB_FLOOR))), -1.0)


def distill_loss(student_tokens: Tensor, teacher_tokens, final_mask: Tensor) -> Tensor:
    """Squared token error summed over channels, averaged over kept tokens of the batch.

    Tokens are (B, n, C), the mask (B, n). Teacher tokens are treated as constants.
    """
    final_mask = T.as_tensor(final_mask)
    teacher = np.asarray(getattr(teacher_tokens, "data", teacher_tokens))
    if student_tokens.shape != teacher.shape:
        raise T.ShapeError(f"token shapes differ: {student_tokens.shape} vs {teacher.shape}")
    kept = final_mask.data.sum()
    if kept <= 0:
        raise ValueError("distill_loss needs at least one kept token")
    per_token = T.tsum(T.square(T.sub(student_tokens, teacher)), axis=-1)
    return T.div(T.tsum(T.mul(per_token, final_mask)), T.tsum(final_mask))


def kl_loss(student_probs: Tensor, teacher_probs, reverse: bool = False) -> Tensor:
    """Batch mean of KL(student || teacher); ``reverse`` gives KL(teacher || student).

    Gradient flows to the student only.
    """
    teacher = np.maximum(np.asarray(getattr(teacher_probs, "data", teacher_probs)), PROB_FLOOR)
    log_s = T.log(T.clamp_min(student_probs, PROB_FLOOR))
    if reverse:
        per_row = T.tsum(T.mul(T.sub(np.log(teacher), log_s), teacher), axis=-1)
    else:
        per_row = T.tsum(T.mul(T.sub(log_s, np.log(teacher)), student_probs), axis=-1)
    return T.mean(per_row)


def ratio_loss(masks: list[Tensor], targets) -> Tensor:
    """Mean over batch and stages of (target - kept fraction)^2.

    Each mask is (B, N) over patch tokens only; the class token is not counted.
    """
    targets = list(targets)
    if len(masks) != len(targets):
        raise ValueError(f"{len(masks)} masks for {len(targets)} ratio targets")
    terms = []
    for m, rho in zip(masks, targets):
        terms.append(T.square(T.sub(rho, T.mean(m, axis=-1))))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(T.tsum(total), 1.0 / (masks[0].shape[0] * len(masks)))


def total_loss(cls, kl, distill, ratio, weights: LossWeights = LossWeights()) -> Tensor:
    out = T.as_tensor(cls)
    for part, w in ((kl, weights.lambda_kl), (distill, weights.lambda_distill), (ratio, weights.lambda_ratio)):
        if part is not None and w:
            out = T.add(out, T.mul(part, w))
    return out
