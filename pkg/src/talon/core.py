"""Core domain types, interval arithmetic, and the grid/seconds coordinate system.

Segments are half-open ``[start, end)``: two segments that merely touch at an
endpoint are disjoint and have temporal IoU 0.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractViolation, ValidationError

SUBSETS = ("training", "validation", "testing")


@dataclass(frozen=True, order=True)
class Segment:
    """Time interval in seconds with ``end > start`` and finite endpoints."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ContractViolation(
                f"segment endpoints must be finite, got [{self.start}, {self.end}]"
            )
        if self.start < 0:
            raise ContractViolation(f"segment start must be >= 0, got {self.start}")
        if self.end <= self.start:
            raise ContractViolation(
                f"segment needs end > start, got [{self.start}, {self.end}]"
            )

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass(frozen=True)
class Proposal:
    """Candidate action interval with a confidence score in [0, 1].

    ``stage`` counts refinement passes: 0 for raw decoder output, k after the
    k-th refinement stage.
    """

    segment: Segment
    score: float
    class_id: int | None = None
    stage: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ContractViolation(f"proposal score must be in [0, 1], got {self.score}")
        if self.class_id is not None and self.class_id < 0:
            raise ContractViolation(f"class_id must be non-negative, got {self.class_id}")
        if self.stage < 0:
            raise ContractViolation(f"stage must be non-negative, got {self.stage}")

    def sort_key(self) -> tuple[float, float, float]:
        """Deterministic ranking key: score descending, then (start, end)."""
        return (-self.score, self.segment.start, self.segment.end)


@dataclass(frozen=True)
class VideoRecord:
    """One annotated video: duration, subset split, and labeled segments."""

    video_id: str
    duration_t: float
    subset: str
    ground_truth: tuple[tuple[int, Segment], ...] = ()

    def __post_init__(self) -> None:
        if not math.isfinite(self.duration_t) or self.duration_t <= 0:
            raise ContractViolation(
                f"{self.video_id}: duration must be positive, got {self.duration_t}"
            )
        if self.subset not in SUBSETS:
            raise ValidationError(
                f"{self.video_id}: unknown subset {self.subset!r}, expected one of {SUBSETS}"
            )
        for class_id, seg in self.ground_truth:
            if class_id < 0:
                raise ValidationError(f"{self.video_id}: negative class id {class_id}")
            if seg.end > self.duration_t:
                raise ValidationError(
                    f"{self.video_id}: ground truth [{seg.start}, {seg.end}] exceeds "
                    f"duration {self.duration_t}"
                )

    @property
    def gt_segments(self) -> list[Segment]:
        return [seg for _, seg in self.ground_truth]


@dataclass(frozen=True)
class GridSpec:
    """Uniform temporal grid of ``d`` cells spanning ``[0, duration_t]`` seconds."""

    d: int
    duration_t: float

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ContractViolation(f"grid length must be >= 2, got {self.d}")
        if not math.isfinite(self.duration_t) or self.duration_t <= 0:
            raise ContractViolation(f"duration must be positive, got {self.duration_t}")

    @property
    def unit(self) -> float:
        """Width of one grid cell in seconds."""
        return self.duration_t / self.d


def tiou(a: Segment, b: Segment) -> float:
    """Temporal IoU of two segments; 0 when the interiors are disjoint."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def pairwise_tiou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Temporal IoU matrix between (n, 2) and (m, 2) segment arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    lo = np.maximum(a[:, None, 0], b[None, :, 0])
    hi = np.minimum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(hi - lo, 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def grid_to_segment(i: int, j: int, spec: GridSpec) -> Segment:
    """Map grid coordinates ``0 <= i < j <= d`` to a segment in seconds."""
    if not 0 <= i < j <= spec.d:
        raise ContractViolation(
            f"grid coordinates need 0 <= i < j <= {spec.d}, got ({i}, {j})"
        )
    return Segment((i / spec.d) * spec.duration_t, (j / spec.d) * spec.duration_t)


def segment_to_grid(s: Segment, spec: GridSpec) -> tuple[float, float]:
    """Fractional grid coordinates of a segment, clamped to the video extent."""
    lo = min(max(s.start, 0.0), spec.duration_t)
    hi = min(max(s.end, 0.0), spec.duration_t)
    return (lo / spec.duration_t * spec.d, hi / spec.duration_t * spec.d)


def feature_length_for(duration_t: float) -> int:
    """Feature sequence length for a video: round(2t), half away from zero, min 2."""
    if not math.isfinite(duration_t) or duration_t <= 0:
        raise ContractViolation(f"duration must be positive, got {duration_t}")
    return max(2, math.floor(2.0 * duration_t + 0.5))


@dataclass(frozen=True)
class AnnotationDb:
    """Ground-truth database: per-video records plus a label -> class id map."""

    videos: dict[str, VideoRecord]
    label_index: dict[str, int] | None = None

    def __post_init__(self) -> None:
        if self.label_index is not None:
            known = set(self.label_index.values())
            for rec in self.videos.values():
                for class_id, _ in rec.ground_truth:
                    if class_id not in known:
                        raise ValidationError(
                            f"{rec.video_id}: class id {class_id} not in label index"
                        )

    def video_ids(self) -> list[str]:
        return sorted(self.videos)

    def restrict(self, subset: str) -> AnnotationDb:
        if subset not in SUBSETS:
            raise ContractViolation(f"unknown subset {subset!r}")
        kept = {vid: rec for vid, rec in self.videos.items() if rec.subset == subset}
        return AnnotationDb(kept, self.label_index)

    def n_instances(self) -> int:
        return sum(len(rec.ground_truth) for rec in self.videos.values())

    def class_ids(self) -> list[int]:
        """Evaluation classes: the label index if present, else observed gt classes."""
        if self.label_index is not None:
            return sorted(set(self.label_index.values()))
        seen = {c for rec in self.videos.values() for c, _ in rec.ground_truth}
        return sorted(seen)


def _clamp_annotations(
    video_id: str, duration: float, raw: list[tuple[int, float, float]]
) -> tuple[tuple[int, Segment], ...]:
    kept: list[tuple[int, Segment]] = []
    for class_id, start, end in raw:
        lo = min(max(start, 0.0), duration)
        hi = min(max(end, 0.0), duration)
        if hi <= lo:
            warnings.warn(
                f"{video_id}: dropping degenerate annotation [{start}, {end}] "
                f"(clamped to [{lo}, {hi}])",
                stacklevel=3,
            )
            continue
        kept.append((class_id, Segment(lo, hi)))
    return tuple(kept)


def load_annotation_db(
    path: str | Path, label_index_path: str | Path | None = None
) -> AnnotationDb:
    """Load an annotation JSON file, clamping out-of-range ground truth.

    The file holds ``{"database": {video_id: {"duration": s, "subset": ...,
    "annotations": [{"label": str, "segment": [start, end]}]}}}``. Labels map
    to class ids through the optional label-index JSON; without one, ids are
    assigned by sorted label order.
    """
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if "database" not in payload:
        raise ValidationError(f"{path}: missing top-level 'database' key")
    database = payload["database"]

    if label_index_path is not None:
        with open(label_index_path, encoding="utf-8") as fh:
            label_index = {str(k): int(v) for k, v in json.load(fh).items()}
    else:
        labels = sorted(
            {a["label"] for entry in database.values() for a in entry.get("annotations", [])}
        )
        label_index = {label: idx for idx, label in enumerate(labels)}

    videos: dict[str, VideoRecord] = {}
    for video_id, entry in database.items():
        duration = float(entry["duration"])
        raw = []
        for ann in entry.get("annotations", []):
            label = ann["label"]
            if label not in label_index:
                raise ValidationError(f"{video_id}: label {label!r} not in label index")
            start, end = (float(x) for x in ann["segment"])
            raw.append((label_index[label], start, end))
        videos[video_id] = VideoRecord(
            video_id=video_id,
            duration_t=duration,
            subset=str(entry["subset"]),
            ground_truth=_clamp_annotations(video_id, duration, raw),
        )
    return AnnotationDb(videos, label_index)


def save_annotation_db(path: str | Path, db: AnnotationDb) -> None:
    """Write the annotation database back to its JSON interchange form."""
    if db.label_index is not None:
        names = {idx: label for label, idx in db.label_index.items()}
    else:
        names = {}
    database = {}
    for video_id in db.video_ids():
        rec = db.videos[video_id]
        database[video_id] = {
            "duration": rec.duration_t,
            "subset": rec.subset,
            "annotations": [
                {"label": names.get(c, str(c)), "segment": [seg.start, seg.end]}
                for c, seg in rec.ground_truth
            ],
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"database": database}, fh, sort_keys=True)


def save_label_index(path: str | Path, label_index: Mapping[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(label_index), fh, sort_keys=True)
