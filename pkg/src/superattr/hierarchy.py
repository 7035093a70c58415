"""Attribute vocabulary, super-class set, and the attribute -> super-class map.

The map can be given (hierarchy.json, including LLM-produced pseudo-label
files) or constructed from text embeddings by nearest-centroid cosine
similarity. Centroids are means of L2-normalized member embeddings, which
makes the assignment invariant to per-attribute embedding scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DUMMY_SUPER_CLASS = "other"


class HierarchyError(Exception):
    pass


@dataclass
class AttributeHierarchy:
    attributes: list[str]
    super_classes: list[str]
    delta: np.ndarray  # [N_a] int, value in [0, N_s)
    object_categories: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.int64)
        if self.delta.shape != (len(self.attributes),):
            raise HierarchyError(
                f"delta length {self.delta.shape} does not match {len(self.attributes)} attributes"
            )
        if len(self.attributes) and (
            self.delta.min() < 0 or self.delta.max() >= len(self.super_classes)
        ):
            raise HierarchyError("delta references a super-class index that does not exist")
        if len(set(self.attributes)) != len(self.attributes):
            raise HierarchyError("duplicate attribute names")

    @property
    def n_attrs(self) -> int:
        return len(self.attributes)

    @property
    def n_super(self) -> int:
        return len(self.super_classes)

    def attr_index(self, name: str) -> int:
        try:
            return self.attributes.index(name)
        except ValueError:
            raise HierarchyError(f"unknown attribute {name!r}") from None

    def members(self, super_idx: int) -> np.ndarray:
        return np.flatnonzero(self.delta == super_idx)

    def to_json_dict(self) -> dict:
        return {
            "attributes": list(self.attributes),
            "super_classes": list(self.super_classes),
            "delta": [int(j) for j in self.delta],
            "objects": list(self.object_categories),
        }

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def load(cls, path: Path | str) -> "AttributeHierarchy":
        d = json.loads(Path(path).read_text())
        for key in ("attributes", "super_classes", "delta"):
            if key not in d:
                raise HierarchyError(f"hierarchy file lacks {key!r}")
        return cls(
            attributes=list(d["attributes"]),
            super_classes=list(d["super_classes"]),
            delta=np.asarray(d["delta"], dtype=np.int64),
            object_categories=list(d.get("objects", [])),
        )


def _norm_rows(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms[:, 0] == 0)
        raise HierarchyError(f"zero-norm {what} row(s) at index {bad.tolist()[:5]}")
    return rows / norms


def map_by_similarity(attr_text_emb: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Assign each attribute to the super-class with the most-similar centroid.

    Similarity is cosine; ties resolve to the lowest super-class index.
    """
    a = _norm_rows(np.asarray(attr_text_emb, dtype=np.float64), "attribute embedding")
    c = _norm_rows(np.asarray(centroids, dtype=np.float64), "centroid")
    sims = a @ c.T
    # argmax returns the first (lowest) index on ties
    return np.argmax(sims, axis=1).astype(np.int64)


def centroids_from_reference(attr_text_emb: np.ndarray, reference_delta: np.ndarray) -> np.ndarray:
    """Per-super-class mean of L2-normalized member embeddings."""
    emb = _norm_rows(np.asarray(attr_text_emb, dtype=np.float64), "attribute embedding")
    delta = np.asarray(reference_delta, dtype=np.int64)
    n_super = int(delta.max()) + 1 if delta.size else 0
    cents = np.zeros((n_super, emb.shape[1]))
    for j in range(n_super):
        members = np.flatnonzero(delta == j)
        if members.size == 0:
            raise HierarchyError(f"super-class {j} has no members in the reference mapping")
        cents[j] = emb[members].mean(axis=0)
    return cents


def mapping_accuracy(
    predicted_delta: Sequence[int],
    reference_delta: Sequence[int],
    exclude: Iterable[int] = (),
) -> float:
    """Fraction of attributes where the two mappings agree.

    Attributes whose *reference* super-class index is in ``exclude`` (the
    dummy group, typically) are left out of the denominator.
    """
    pred = np.asarray(predicted_delta, dtype=np.int64)
    ref = np.asarray(reference_delta, dtype=np.int64)
    if pred.shape != ref.shape:
        raise HierarchyError(f"delta length mismatch: {pred.shape} vs {ref.shape}")
    excluded = set(int(j) for j in exclude)
    keep = np.array([int(r) not in excluded for r in ref], dtype=bool)
    if not keep.any():
        raise HierarchyError("no attributes left after exclusion")
    return float(np.mean(pred[keep] == ref[keep]))


def exclude_indices(hierarchy: AttributeHierarchy, names: Iterable[str]) -> list[int]:
    """Resolve super-class names to indices, skipping names not present."""
    return [hierarchy.super_classes.index(n) for n in names if n in hierarchy.super_classes]
