"""Per-class average precision and grouped reporting.

AP is computed per attribute over the instance ranking, with unannotated
entries dropped first. Classes without a surviving positive have undefined
AP and are excluded from group means (reported as null, never as zero).
Groups: base/novel/all from the zero-shot split, plus optional
head/medium/tail buckets from positive-annotation counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Split


@dataclass
class GroupStat:
    n_classes: int
    n_defined: int
    mean_ap: float | None

    def to_json_dict(self) -> dict:
        return {"n_classes": self.n_classes, "n_defined": self.n_defined, "mean_ap": self.mean_ap}


@dataclass
class ScoreReport:
    per_class_ap: list[float | None]
    groups: dict[str, GroupStat]
    class_groups: list[str] | None = None  # head/medium/tail per class
    counts: dict = field(default_factory=dict)

    @property
    def ap_base(self) -> float | None:
        return self.groups["base"].mean_ap

    @property
    def ap_novel(self) -> float | None:
        return self.groups["novel"].mean_ap

    @property
    def ap_all(self) -> float | None:
        return self.groups["all"].mean_ap

    def to_json_dict(self) -> dict:
        return {
            "per_class_ap": self.per_class_ap,
            "ap_base": self.ap_base,
            "ap_novel": self.ap_novel,
            "ap_all": self.ap_all,
            "groups": {k: v.to_json_dict() for k, v in self.groups.items()},
            "class_groups": self.class_groups,
            "counts": self.counts,
        }

    def save_json(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    def save_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "n_classes", "n_defined", "mean_ap"])
            for name, stat in self.groups.items():
                writer.writerow(
                    [name, stat.n_classes, stat.n_defined,
                     "" if stat.mean_ap is None else f"{stat.mean_ap:.6f}"]
                )


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """AP over one class's instance ranking.

    Entries labeled -1 are dropped. Remaining entries rank by descending
    score with ties resolved toward the lower original index. Returns the
    mean of precision-at-each-positive, or None when no positives survive.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores shape {s.shape} != labels shape {y.shape}")
    keep = y != -1
    s, y = s[keep], y[keep]
    if not (y == 1).any():
        return None
    order = np.argsort(-s, kind="stable")
    ranked = y[order] == 1
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.size + 1)
    precisions = hits[ranked] / ranks[ranked]
    return float(precisions.mean())


def assign_frequency_groups(
    labels: np.ndarray, head_min: int, medium_min: int
) -> list[str]:
    """Bucket classes by positive-annotation count thresholds."""
    pos_counts = (np.asarray(labels) == 1).sum(axis=0)
    out = []
    for c in pos_counts:
        if c >= head_min:
            out.append("head")
        elif c >= medium_min:
            out.append("medium")
        else:
            out.append("tail")
    return out


def _group_stat(per_class: list[float | None], indices: np.ndarray) -> GroupStat:
    vals = [per_class[i] for i in indices if per_class[i] is not None]
    return GroupStat(
        n_classes=len(indices),
        n_defined=len(vals),
        mean_ap=float(np.mean(vals)) if vals else None,
    )


def grouped_report(
    scores: np.ndarray,
    labels: np.ndarray,
    split: Split,
    freq_thresholds: tuple[int, int] | None = None,
) -> ScoreReport:
    """Per-class AP plus base/novel/all (and optional frequency) means.

    ``scores`` and ``labels`` are [n_instances, n_classes]; ``freq_thresholds``
    is (head_min, medium_min) in positive-annotation counts.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores shape {s.shape} != labels shape {y.shape}")
    n_classes = s.shape[1]
    per_class = [average_precision(s[:, i], y[:, i]) for i in range(n_classes)]

    groups = {
        "base": _group_stat(per_class, split.base),
        "novel": _group_stat(per_class, split.novel),
        "all": _group_stat(per_class, np.arange(n_classes)),
    }
    class_groups = None
    if freq_thresholds is not None:
        head_min, medium_min = freq_thresholds
        class_groups = assign_frequency_groups(y, head_min, medium_min)
        tags = np.asarray(class_groups)
        for name in ("head", "medium", "tail"):
            groups[name] = _group_stat(per_class, np.flatnonzero(tags == name))

    counts = {
        "n_instances": int(s.shape[0]),
        "n_classes": n_classes,
        "positives_per_class": [int(c) for c in (y == 1).sum(axis=0)],
    }
    return ScoreReport(
        per_class_ap=per_class, groups=groups, class_groups=class_groups, counts=counts
    )
