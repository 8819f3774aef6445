"""Supervision targets: confidence-map labels, boundary labels, actionness
labels, cascade stage assignment, and offset regression targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import GridSpec, Proposal, Segment, pairwise_tiou
from .errors import ContractViolation

__all__ = [
    "StageAssignment",
    "bm_label_map",
    "boundary_labels",
    "action_score_labels",
    "cascade_assign",
    "offset_targets",
    "valid_cell_mask",
]


def valid_cell_mask(d: int) -> np.ndarray:
    """Boolean (start, duration) mask of cells whose segment fits in the grid.

    Cell (i, dur) spans grid coordinates [i, i + dur + 1], so it is valid iff
    i + dur + 1 <= d; everything below the anti-diagonal is dead storage.
    """
    i = np.arange(d)[:, None]
    dur = np.arange(d)[None, :]
    return i + dur + 1 <= d


def _cell_bounds(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell segment start and end times, (d, d) arrays in seconds."""
    d = spec.d
    i = np.arange(d, dtype=np.float64)[:, None]
    dur = np.arange(d, dtype=np.float64)[None, :]
    starts = (i / d) * spec.duration_t
    ends = ((i + dur + 1.0) / d) * spec.duration_t
    return np.broadcast_to(starts, (d, d)), ends


def bm_label_map(gts: list[Segment], spec: GridSpec) -> np.ndarray:
    """Dense (start, duration) label map of max temporal IoU with ground truth.

    Invalid cells are stored as exact zeros. An empty ground-truth list gives
    an all-zero map.
    """
    d = spec.d
    out = np.zeros((d, d), dtype=np.float64)
    if not gts:
        return out
    starts, ends = _cell_bounds(spec)
    mask = valid_cell_mask(d)
    for gt in gts:
        inter = np.clip(np.minimum(ends, gt.end) - np.maximum(starts, gt.start), 0.0, None)
        union = (ends - starts) + gt.length - inter
        np.maximum(out, np.where(inter > 0, inter / union, 0.0), out=out)
    out[~mask] = 0.0
    return out


def boundary_labels(
    gts: list[Segment], spec: GridSpec, expand_ratio: float = 0.1
) -> tuple[np.ndarray, np.ndarray]:
    """Binary start/end vectors rasterized from ground-truth boundaries.

    A cell is positive when it overlaps the expanded boundary region
    [b - r, b + r] by more than half a grid unit, with r the larger of
    ``expand_ratio`` times the segment length and one grid unit.
    """
    if expand_ratio <= 0:
        raise ContractViolation(f"expand_ratio must be > 0, got {expand_ratio}")
    d = spec.d
    unit = spec.unit
    cell_lo = np.arange(d, dtype=np.float64) * unit
    cell_hi = cell_lo + unit
    start = np.zeros(d, dtype=np.float64)
    end = np.zeros(d, dtype=np.float64)
    for gt in gts:
        r = max(expand_ratio * gt.length, unit)
        for boundary, vec in ((gt.start, start), (gt.end, end)):
            overlap = np.minimum(cell_hi, boundary + r) - np.maximum(cell_lo, boundary - r)
            vec[overlap > 0.5 * unit] = 1.0
    return start, end


def action_score_labels(gts: list[Segment], spec: GridSpec) -> np.ndarray:
    """Per-cell actionness: 1 where the cell center falls inside ground truth."""
    centers = (np.arange(spec.d, dtype=np.float64) + 0.5) * spec.unit
    out = np.zeros(spec.d, dtype=np.float64)
    for gt in gts:
        out[(centers >= gt.start) & (centers < gt.end)] = 1.0
    return out


@dataclass(frozen=True)
class StageAssignment:
    """Label assignment of one proposal for one cascade stage."""

    proposal_index: int
    is_positive: bool
    matched_gt: int | None
    target_iou: float
    offset_target: tuple[float, float] | None

    def __post_init__(self) -> None:
        if self.is_positive and self.matched_gt is None:
            raise ContractViolation("positive assignment requires a matched ground truth")


def offset_targets(p: Segment, gt: Segment) -> tuple[float, float]:
    """Regression targets moving p onto gt: relative center shift, log length ratio.

    Exact inverse of :func:`talon.postprocess.apply_offsets` before clamping.
    """
    pl = p.length
    if pl <= 0:
        raise ContractViolation("proposal segment has zero length")
    dc = (gt.center - p.center) / pl
    dl = math.log(gt.length / pl)
    return dc, dl


def cascade_assign(
    proposals: list[Proposal], gts: list[Segment], iou_threshold: float
) -> list[StageAssignment]:
    """Match each proposal to its best ground truth at one cascade threshold.

    Ties in max IoU break toward the earlier ground-truth index. Positives
    carry offset regression targets; with no ground truth everything is
    negative with target IoU 0.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ContractViolation(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    if not gts:
        return [
            StageAssignment(k, False, None, 0.0, None) for k in range(len(proposals))
        ]
    p_arr = np.array([(p.segment.start, p.segment.end) for p in proposals], dtype=np.float64)
    g_arr = np.array([(g.start, g.end) for g in gts], dtype=np.float64)
    ious = pairwise_tiou(p_arr, g_arr) if len(proposals) else np.zeros((0, len(gts)))
    out: list[StageAssignment] = []
    for k, prop in enumerate(proposals):
        best = int(np.argmax(ious[k]))
        best_iou = float(ious[k, best])
        positive = best_iou >= iou_threshold
        offset = offset_targets(prop.segment, gts[best]) if positive else None
        out.append(StageAssignment(k, positive, best if positive else best, best_iou, offset))
    return out
