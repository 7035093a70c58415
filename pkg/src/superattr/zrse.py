"""Retrieval-based score enhancement at inference time.

The frozen adapter's output rows are compared to each attribute's text
embedding; the best match becomes that attribute's retrieval score. The K
attributes with the highest retrieval scores get the raw score added to
their logit before the sigmoid; everyone else keeps the plain prediction,
bit for bit.
"""

from __future__ import annotations

import numpy as np

DEFAULT_TOP_K = 2


def retrieval_scores(attr_text_emb: np.ndarray, z_hat: np.ndarray) -> np.ndarray:
    """Max inner product between each attribute embedding and any adapter row."""
    z = np.asarray(z_hat, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"z_hat must be [n_z, d_q] with n_z >= 1, got {z.shape}")
    return (np.asarray(attr_text_emb, dtype=np.float64) @ z.T).max(axis=1)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties go to the lower index."""
    r = np.asarray(scores)
    if k < 0:
        raise ValueError("k must be >= 0")
    k = min(k, r.shape[0])
    if k == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-r, kind="stable")
    return order[:k]


def enhance(
    c_bar: np.ndarray,
    r: np.ndarray,
    k: int = DEFAULT_TOP_K,
    eligible: np.ndarray | None = None,
) -> np.ndarray:
    """Sigmoid scores with the top-k retrieval scores added to their logits.

    ``eligible`` optionally restricts which attribute indices may be
    enhanced (the novel-only configuration); top-k is then taken within
    that subset. Non-selected entries are computed identically to the
    plain path.
    """
    c = np.asarray(c_bar, dtype=np.float64)
    rr = np.asarray(r, dtype=np.float64)
    if c.shape != rr.shape:
        raise ValueError(f"score shapes differ: {c.shape} vs {rr.shape}")
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-c))
        if eligible is None:
            chosen = top_k_indices(rr, k)
        else:
            eligible = np.asarray(eligible, dtype=np.int64)
            within = top_k_indices(rr[eligible], k)
            chosen = eligible[within]
        out[chosen] = 1.0 / (1.0 + np.exp(-(c[chosen] + rr[chosen])))
    return out
