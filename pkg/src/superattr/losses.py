"""Training losses: asymmetric multi-label classification per context, the
super-class consistency term, and their weighted total.

Label semantics: 1 positive, 0 negative, -1 unannotated. Unannotated entries
contribute neither loss nor gradient. Per-entry losses are averaged over the
annotated entries of each instance and then over the batch, so the total is
batch-size invariant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import numerics as nm
from .numerics import Parameter, Tensor

LOG_FLOOR = 1e-12


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05
    scr_weight: float = 2.0  # serialized as "lambda"

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise LossConfigError("focusing exponents must be >= 0")
        if not (0.0 <= self.clip < 1.0):
            raise LossConfigError("clip must be in [0, 1)")
        if self.scr_weight < 0:
            raise LossConfigError("lambda must be >= 0")


def asymmetric_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Per-class binary loss with separate focusing for positives/negatives.

    With p = sigmoid(logit) and p_m = max(p - clip, 0):
      positives contribute -(1-p)^g+ * log(p),
      negatives contribute -(p_m)^g- * log(1 - p_m),
      unannotated entries contribute nothing.
    Reduction: mean over annotated entries per instance, then over the batch
    (a single instance reduces to its own mean; 0 if nothing is annotated).
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    y = np.asarray(labels)
    if y.shape != logits.shape:
        raise LossConfigError(f"labels shape {y.shape} != logits shape {logits.shape}")
    pos = (y == 1).astype(np.float64)
    neg = (y == 0).astype(np.float64)

    p = nm.sigmoid_t(logits)
    pos_term = nm.pow_const(1.0 - p, cfg.gamma_pos) * nm.tlog(nm.clamp_min(p, LOG_FLOOR))
    p_m = nm.relu(p - cfg.clip)
    neg_term = nm.pow_const(p_m, cfg.gamma_neg) * nm.tlog(nm.clamp_min(1.0 - p_m, LOG_FLOOR))
    per_entry = -(pos * pos_term + neg * neg_term)

    annotated = pos + neg
    counts = annotated.sum(axis=-1)
    denom = np.where(counts > 0, counts, 1.0)
    per_instance = nm.tsum(per_entry, axis=-1) / denom
    if per_instance.ndim == 0:
        return per_instance
    return nm.tmean(per_instance)


def scr_loss(
    q_bar: Tensor,
    mask_token_feats: np.ndarray,
    scr_head: Parameter,
    active: Iterable[int] | np.ndarray,
) -> Tensor:
    """L1 distance between projected averaged queries and frozen prompt
    features, summed over the active super-classes of one instance.

    Each row contributes its mean absolute error over the embedding dims
    (the standard L1-loss reduction), so the term stays on the same scale
    as the classification loss regardless of embedding width. ``active``
    is the set of super-class indices with a usable target (the dummy
    group and all-zero rows are excluded by the caller).
    """
    mask = np.zeros(mask_token_feats.shape[0])
    mask[np.asarray(list(active), dtype=np.int64)] = 1.0
    return scr_loss_batched(q_bar, mask_token_feats[None], scr_head, mask[None])


def scr_loss_batched(
    q_bar: Tensor,
    targets: np.ndarray,
    scr_head: Parameter,
    active_mask: np.ndarray,
) -> Tensor:
    """Batched consistency loss: sum of per-row mean-abs error over active
    rows, averaged over the batch. Accepts [N_s, d] / [B, N_s, d] queries."""
    if q_bar.ndim == 2:
        q_bar = nm.reshape(q_bar, (1, *q_bar.shape))
    projected = nm.matmul(q_bar, nm.transpose_last(scr_head))  # [B, N_s, d_q]
    diff = nm.tabs(projected - np.asarray(targets, dtype=np.float64))
    per_group = nm.tmean(diff, axis=-1)  # [B, N_s]
    per_instance = nm.tsum(per_group * np.asarray(active_mask, dtype=np.float64), axis=-1)
    return nm.tmean(per_instance)


def total_loss(
    context_logits: dict[str, Tensor],
    labels_base: np.ndarray,
    q_bar: Tensor,
    scr_targets: np.ndarray,
    scr_active: np.ndarray,
    scr_head: Parameter,
    cfg: LossConfig,
) -> tuple[Tensor, dict[str, float]]:
    """Sum of per-context asymmetric losses plus the weighted consistency
    term. ``labels_base`` must already have novel columns forced to -1.

    Returns the scalar loss and a float breakdown for logging. With a zero
    lambda the consistency term never enters the graph, so the head receives
    exactly zero gradient.
    """
    asym_total: Tensor | None = None
    for ctx in context_logits:
        term = asymmetric_loss(context_logits[ctx], labels_base, cfg)
        asym_total = term if asym_total is None else asym_total + term
    assert asym_total is not None, "at least one context required"
    parts = {"loss_asym": float(asym_total.data)}
    if cfg.scr_weight > 0:
        scr = scr_loss_batched(q_bar, scr_targets, scr_head, scr_active)
        parts["loss_scr"] = float(scr.data)
        total = asym_total + cfg.scr_weight * scr
    else:
        parts["loss_scr"] = 0.0
        total = asym_total
    parts["loss_total"] = float(total.data)
    return total, parts
