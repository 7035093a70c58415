"""Annotation ingestion, label vectors, zero-shot splits, and batch assembly.

Annotations are line-delimited JSON records shaped like region-attribute
datasets: one object region per line with a box, an RLE segmentation mask,
an object category, and explicit positive/negative attribute name lists.
Label vectors use 1 / 0 / -1 for positive / negative / unannotated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .fixtures import EmbeddingFixture
from .hierarchy import AttributeHierarchy

POSITIVE, NEGATIVE, UNKNOWN = 1, 0, -1


class AnnotationError(Exception):
    pass


class UnknownAttributeError(AnnotationError):
    def __init__(self, offenders: Sequence[str]):
        self.offenders = sorted(set(offenders))
        super().__init__(f"unknown attribute name(s): {self.offenders}")


class MissingFixtureEntryError(KeyError):
    def __init__(self, instance_id: str):
        self.instance_id = instance_id
        super().__init__(f"fixture has no per-instance arrays for {instance_id!r}")


def decode_rle(counts: Sequence[int], size: tuple[int, int]) -> np.ndarray:
    """Decode alternating run lengths (zeros first, row-major) to an HxW grid."""
    h, w = size
    total = h * w
    if any(c < 0 for c in counts):
        raise AnnotationError("RLE counts must be nonnegative")
    if sum(counts) != total:
        raise AnnotationError(f"RLE counts sum to {sum(counts)}, mask has {total} cells")
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    value = 0
    for c in counts:
        if value:
            flat[pos:pos + c] = 1
        pos += c
        value ^= 1
    return flat.reshape(h, w)


def encode_rle(mask: np.ndarray) -> list[int]:
    """Inverse of decode_rle: row-major alternating runs starting with zeros."""
    flat = np.asarray(mask).ravel().astype(np.uint8)
    counts: list[int] = []
    value = 0
    run = 0
    for v in flat:
        if v == value:
            run += 1
        else:
            counts.append(run)
            value ^= 1
            run = 1
    counts.append(run)
    return counts


@dataclass
class Instance:
    """One annotated object region."""

    instance_id: str
    image_id: str
    box: tuple[float, float, float, float]  # x, y, w, h in pixels
    mask_size: tuple[int, int]  # H, W (equals the image grid)
    mask_counts: list[int]
    object_category: str
    positive_attributes: list[str]
    negative_attributes: list[str]

    def __post_init__(self):
        x, y, w, h = self.box
        gh, gw = self.mask_size
        if w <= 0 or h <= 0:
            raise AnnotationError(f"{self.instance_id}: box must have positive extent")
        if x < 0 or y < 0 or x + w > gw or y + h > gh:
            raise AnnotationError(f"{self.instance_id}: box {self.box} outside {gh}x{gw} image")
        overlap = set(self.positive_attributes) & set(self.negative_attributes)
        if overlap:
            raise AnnotationError(
                f"{self.instance_id}: attributes both positive and negative: {sorted(overlap)}"
            )

    def mask(self) -> np.ndarray:
        return decode_rle(self.mask_counts, self.mask_size)

    def to_json_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "image_id": self.image_id,
            "box": list(self.box),
            "mask": {"size": list(self.mask_size), "counts": list(self.mask_counts)},
            "object": self.object_category,
            "positive_attributes": list(self.positive_attributes),
            "negative_attributes": list(self.negative_attributes),
        }


def build_label_vector(instance: Instance, hierarchy: AttributeHierarchy) -> np.ndarray:
    """1 for listed positives, 0 for listed negatives, -1 otherwise."""
    y = np.full(hierarchy.n_attrs, UNKNOWN, dtype=np.int8)
    index = {name: i for i, name in enumerate(hierarchy.attributes)}
    unknown = [n for n in instance.positive_attributes + instance.negative_attributes
               if n not in index]
    if unknown:
        raise UnknownAttributeError(unknown)
    for n in instance.positive_attributes:
        y[index[n]] = POSITIVE
    for n in instance.negative_attributes:
        y[index[n]] = NEGATIVE
    return y


def load_annotations(
    path: Path | str, hierarchy: AttributeHierarchy
) -> tuple[list[Instance], np.ndarray]:
    """Parse annotations.jsonl into instances plus an [N, N_a] label matrix."""
    instances: list[Instance] = []
    offenders: list[str] = []
    rows: list[np.ndarray] = []
    index = {name: i for i, name in enumerate(hierarchy.attributes)}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                inst = Instance(
                    instance_id=str(rec["instance_id"]),
                    image_id=str(rec["image_id"]),
                    box=tuple(float(v) for v in rec["box"]),
                    mask_size=tuple(int(v) for v in rec["mask"]["size"]),
                    mask_counts=[int(c) for c in rec["mask"]["counts"]],
                    object_category=str(rec["object"]),
                    positive_attributes=list(rec["positive_attributes"]),
                    negative_attributes=list(rec["negative_attributes"]),
                )
            except UnknownAttributeError:
                raise
            except (KeyError, ValueError, TypeError, AnnotationError) as exc:
                raise AnnotationError(f"{path}:{lineno}: malformed record: {exc}") from exc
            bad = [n for n in inst.positive_attributes + inst.negative_attributes
                   if n not in index]
            if bad:
                offenders.extend(bad)
                continue
            instances.append(inst)
            rows.append(build_label_vector(inst, hierarchy))
    if offenders:
        raise UnknownAttributeError(offenders)
    labels = np.stack(rows) if rows else np.zeros((0, hierarchy.n_attrs), dtype=np.int8)
    return instances, labels


def write_annotations(path: Path | str, instances: Sequence[Instance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json_dict()) + "\n")


@dataclass
class Split:
    """Base/novel attribute index partition. Training only touches base."""

    base: np.ndarray
    novel: np.ndarray

    @classmethod
    def from_novel_names(cls, novel_names: Sequence[str], hierarchy: AttributeHierarchy) -> "Split":
        index = {name: i for i, name in enumerate(hierarchy.attributes)}
        missing = [n for n in novel_names if n not in index]
        if missing:
            raise UnknownAttributeError(missing)
        novel = np.array(sorted(index[n] for n in set(novel_names)), dtype=np.int64)
        base = np.setdiff1d(np.arange(hierarchy.n_attrs), novel)
        return cls(base=base, novel=novel)

    @classmethod
    def load(cls, path: Path | str, hierarchy: AttributeHierarchy) -> "Split":
        data = json.loads(Path(path).read_text())
        if isinstance(data, dict):
            data = data.get("novel", [])
        return cls.from_novel_names(list(data), hierarchy)

    def save(self, path: Path | str, hierarchy: AttributeHierarchy) -> None:
        names = [hierarchy.attributes[i] for i in self.novel]
        Path(path).write_text(json.dumps(names, indent=1))

    def mask_to_base(self, labels: np.ndarray) -> np.ndarray:
        """Force novel columns to -1 so training never sees them."""
        masked = labels.copy()
        masked[..., self.novel] = UNKNOWN
        return masked


@dataclass
class Batch:
    instances: list[Instance]
    labels: np.ndarray  # [B, N_a]
    object_indices: np.ndarray  # [B]
    f_img: np.ndarray  # [B, hw, d_v]
    f_crop: np.ndarray  # [B, hw, d_v]
    z_hat: np.ndarray  # [B, n_z, d_q]
    mask_token_feats: np.ndarray  # [B, N_s, d_q]
    masks: list[np.ndarray]  # per-instance HxW grids

    def __len__(self) -> int:
        return len(self.instances)


def assemble_batch(
    instances: Sequence[Instance],
    labels: np.ndarray,
    fixture: EmbeddingFixture,
    hierarchy: AttributeHierarchy,
) -> Batch:
    """Gather fixture arrays for the given instances, in the given order."""
    obj_index = {name: i for i, name in enumerate(hierarchy.object_categories)}
    for inst in instances:
        if not fixture.has_instance(inst.instance_id):
            raise MissingFixtureEntryError(inst.instance_id)
        if inst.object_category not in obj_index:
            raise AnnotationError(
                f"{inst.instance_id}: object {inst.object_category!r} not in hierarchy"
            )
    ids = [inst.instance_id for inst in instances]
    return Batch(
        instances=list(instances),
        labels=np.asarray(labels),
        object_indices=np.array([obj_index[i.object_category] for i in instances], dtype=np.int64),
        f_img=np.stack([fixture.f_img[i] for i in ids]),
        f_crop=np.stack([fixture.f_crop[i] for i in ids]),
        z_hat=np.stack([fixture.z_hat[i] for i in ids]),
        mask_token_feats=np.stack([fixture.mask_token_feats[i] for i in ids]),
        masks=[inst.mask() for inst in instances],
    )


def batch_iterator(
    instances: Sequence[Instance],
    labels: np.ndarray,
    fixture: EmbeddingFixture,
    hierarchy: AttributeHierarchy,
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> Iterator[Batch]:
    """Yield batches in shuffled order (or input order when rng is None)."""
    n = len(instances)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield assemble_batch(
            [instances[i] for i in idx], labels[idx], fixture, hierarchy
        )
