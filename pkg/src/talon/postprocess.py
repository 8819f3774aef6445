"""Proposal post-processing: Gaussian soft-NMS and cascade refinement.

The cascade applies a sequence of refinement stages; each stage predicts a
(center shift, log-length, IoU) triple per proposal, moves the segment, and
re-scores it with the predicted IoU. Stages are pluggable: the built-in
concrete refiner is an affine head over RoI-pooled features fitted by ridge
least squares, and any callable with the same signature can stand in (the
synthetic oracle refiner does exactly that).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Proposal, Segment, VideoRecord, pairwise_tiou
from .errors import ContractViolation, FormatError, NumericalError
from .numerics import FeatureSequence, roi_align_1d

__all__ = [
    "SoftNmsConfig",
    "soft_nms",
    "apply_offsets",
    "RefinerParams",
    "RefinerFn",
    "CascadeConfig",
    "pooled_roi_vector",
    "refine_stage",
    "cascade_refine",
    "fit_linear_refiner",
    "fit_linear_cascade",
]

# A refiner maps (proposals, features, video) to an (n, 3) array of
# (center shift, log length delta, predicted IoU in [0, 1]) rows.
RefinerFn = Callable[[Sequence[Proposal], FeatureSequence, VideoRecord], np.ndarray]

IOU_CLIP = 1e-4


@dataclass(frozen=True)
class SoftNmsConfig:
    sigma: float = 0.4
    min_score: float = 1e-4
    top_k: int = 100


def soft_nms(
    proposals: Sequence[Proposal],
    sigma: float = 0.4,
    min_score: float = 1e-4,
    top_k: int = 100,
) -> list[Proposal]:
    """Gaussian-decay soft non-maximum suppression.

    Repeatedly selects the highest-scoring remaining proposal (ties broken by
    start then end) and decays every other remaining score by
    ``exp(-tiou^2 / sigma)``. Stops after ``top_k`` selections or when the
    best remaining score falls below ``min_score``. Segments are never
    altered and scores never increase.
    """
    if sigma <= 0:
        raise ContractViolation(f"sigma must be > 0, got {sigma}")
    if top_k < 1:
        raise ContractViolation(f"top_k must be >= 1, got {top_k}")
    if not proposals:
        return []

    segs = np.array(
        [(p.segment.start, p.segment.end) for p in proposals], dtype=np.float64
    )
    scores = np.array([p.score for p in proposals], dtype=np.float64)
    starts, ends = segs[:, 0], segs[:, 1]
    alive = np.ones(len(proposals), dtype=bool)
    selected: list[tuple[int, float]] = []

    while len(selected) < top_k and alive.any():
        live = np.nonzero(alive)[0]
        best = scores[live].max()
        if best < min_score:
            break
        cand = live[scores[live] == best]
        pick = cand[np.lexsort((ends[cand], starts[cand]))[0]]
        selected.append((int(pick), float(scores[pick])))
        alive[pick] = False
        live = np.nonzero(alive)[0]
        if live.size:
            overlap = pairwise_tiou(segs[pick], segs[live])[0]
            scores[live] *= np.exp(-(overlap**2) / sigma)

    out = []
    for idx, sc in selected:
        p = proposals[idx]
        out.append(Proposal(p.segment, sc, class_id=p.class_id, stage=p.stage))
    return out


def apply_offsets(s: Segment, dc: float, dl: float, clamp_to: float) -> Segment:
    """Move a segment by a relative center shift and log-length delta.

    The result is clipped to [0, clamp_to]; if clipping leaves less than
    clamp_to / 1000 of length, the segment is expanded to that floor (shifted
    back inside the window when necessary).
    """
    if clamp_to <= 0:
        raise ContractViolation(f"clamp_to must be > 0, got {clamp_to}")
    pl = s.length
    center = s.center + dc * pl
    length = pl * math.exp(dl)
    lo = max(0.0, center - 0.5 * length)
    hi = min(clamp_to, center + 0.5 * length)
    eps = clamp_to / 1000.0
    if hi - lo < eps:
        mid = 0.5 * (lo + hi)
        lo, hi = mid - 0.5 * eps, mid + 0.5 * eps
        if lo < 0.0:
            hi -= lo
            lo = 0.0
        if hi > clamp_to:
            lo -= hi - clamp_to
            hi = clamp_to
    return Segment(lo, hi)


@dataclass(frozen=True)
class RefinerParams:
    """Affine refinement head: rows (dc, dl, iou_logit) over the pooled vector."""

    weights: np.ndarray  # (3, n_features)
    bias: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != 3:
            raise FormatError(f"weights must be (3, n), got {w.shape}")
        if b.shape != (3,):
            raise FormatError(f"bias must be a 3-vector, got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise FormatError("refiner parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class CascadeConfig:
    """Refinement cascade: ordered (refiner, positive-IoU threshold) stages.

    Thresholds must be strictly increasing; they drive training-time label
    assignment, not inference. ``context_ratio`` expands each proposal span
    on both sides before RoI pooling so the pooled window sees boundary
    context beyond the proposal itself.
    """

    stages: tuple[tuple[RefinerParams | RefinerFn, float], ...]
    roi_bins: int = 16
    context_ratio: float = 0.5
    samples_per_bin: int = 2
    fuse_scores: bool = False

    def __post_init__(self) -> None:
        if not self.stages:
            raise ContractViolation("cascade needs at least one stage")
        thresholds = [t for _, t in self.stages]
        if any(not 0 < t < 1 for t in thresholds):
            raise ContractViolation(f"stage thresholds must be in (0, 1), got {thresholds}")
        if any(b >= a for a, b in zip(thresholds[1:], thresholds)):
            raise ContractViolation(f"stage thresholds must strictly increase, got {thresholds}")
        if self.roi_bins < 1:
            raise ContractViolation(f"roi_bins must be >= 1, got {self.roi_bins}")
        if self.context_ratio < 0:
            raise ContractViolation(f"context_ratio must be >= 0, got {self.context_ratio}")


def _sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-x))


def pooled_roi_vector(
    feats: FeatureSequence,
    segment: Segment,
    video: VideoRecord,
    bins: int,
    context_ratio: float,
    samples_per_bin: int = 2,
) -> np.ndarray:
    """RoI-pool a (context-expanded) segment and append its geometry.

    Returns the channel-major flattened pooled matrix followed by the
    duration-normalized (center, length) of the unexpanded segment.
    """
    span = segment.length
    lo_s = segment.start - context_ratio * span
    hi_s = segment.end + context_ratio * span
    scale = feats.length / video.duration_t
    pooled = roi_align_1d(feats, (lo_s * scale, hi_s * scale), bins, samples_per_bin)
    geometry = np.array(
        [segment.center / video.duration_t, span / video.duration_t], dtype=np.float64
    )
    return np.concatenate([pooled.ravel(), geometry])


def _linear_refiner_outputs(
    params: RefinerParams,
    proposals: Sequence[Proposal],
    feats: FeatureSequence,
    video: VideoRecord,
    cfg: CascadeConfig,
) -> np.ndarray:
    expected = feats.channels * cfg.roi_bins + 2
    if params.n_features != expected:
        raise FormatError(
            f"refiner expects {params.n_features} features but pooling produces {expected}"
        )
    rows = np.empty((len(proposals), 3), dtype=np.float64)
    for k, p in enumerate(proposals):
        x = pooled_roi_vector(
            feats, p.segment, video, cfg.roi_bins, cfg.context_ratio, cfg.samples_per_bin
        )
        rows[k] = params.weights @ x + params.bias
    rows[:, 2] = _sigmoid(rows[:, 2])
    return rows


def refine_stage(
    proposals: Sequence[Proposal],
    refiner: RefinerParams | RefinerFn,
    feats: FeatureSequence,
    cfg: CascadeConfig,
    video: VideoRecord,
) -> list[Proposal]:
    """Apply one refinement stage: move every segment, re-score with predicted IoU."""
    if not proposals:
        return []
    if isinstance(refiner, RefinerParams):
        rows = _linear_refiner_outputs(refiner, proposals, feats, video, cfg)
    else:
        rows = np.asarray(refiner(proposals, feats, video), dtype=np.float64)
    if rows.shape != (len(proposals), 3):
        raise FormatError(f"refiner output must be (n, 3), got {rows.shape}")

    out = []
    for p, (dc, dl, iou) in zip(proposals, rows):
        seg = apply_offsets(p.segment, float(dc), float(dl), video.duration_t)
        score = float(np.clip(iou, 0.0, 1.0))
        if cfg.fuse_scores:
            score *= p.score
        out.append(Proposal(seg, score, class_id=p.class_id, stage=p.stage + 1))
    return out


def cascade_refine(
    proposals: Sequence[Proposal],
    cfg: CascadeConfig,
    feats: FeatureSequence,
    video: VideoRecord,
) -> list[Proposal]:
    """Run every cascade stage in order and return the final stage's proposals."""
    current = list(proposals)
    for refiner, _ in cfg.stages:
        current = refine_stage(current, refiner, feats, cfg, video)
    return sorted(current, key=Proposal.sort_key)


def fit_linear_refiner(
    training: Sequence[tuple[np.ndarray, float, float, float]], ridge: float = 0.0
) -> RefinerParams:
    """Ridge least-squares fit of the affine refinement head.

    Rows are (pooled feature vector, dc, dl, iou) tuples; the IoU column is
    fitted in logit space with targets clipped to [1e-4, 1 - 1e-4]. The bias
    is not penalized. Deterministic for fixed inputs.
    """
    if ridge < 0:
        raise ContractViolation(f"ridge must be >= 0, got {ridge}")
    if not training:
        raise ContractViolation("refiner fitting needs at least one sample")
    x = np.stack([np.asarray(row[0], dtype=np.float64) for row in training])
    if x.ndim != 2:
        raise ContractViolation("pooled feature vectors must be 1-D and equal length")
    n, dim = x.shape
    targets = np.array([[row[1], row[2], row[3]] for row in training], dtype=np.float64)
    iou = np.clip(targets[:, 2], IOU_CLIP, 1.0 - IOU_CLIP)
    targets[:, 2] = np.log(iou / (1.0 - iou))

    xa = np.concatenate([x, np.ones((n, 1))], axis=1)
    normal = xa.T @ xa
    normal[:dim, :dim] += ridge * np.eye(dim)
    rhs = xa.T @ targets
    try:
        theta = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "normal equations are singular; refit with ridge > 0"
        ) from exc
    if not np.all(np.isfinite(theta)):
        raise NumericalError("non-finite refiner solution; refit with ridge > 0")
    return RefinerParams(weights=theta[:-1].T, bias=theta[-1])


def _stage_training_rows(
    proposals: Sequence[Proposal],
    gts: list[Segment],
    threshold: float,
    feats: FeatureSequence,
    video: VideoRecord,
    cfg: CascadeConfig,
) -> list[tuple[np.ndarray, float, float, float]]:
    from .targets import cascade_assign

    rows = []
    assignments = cascade_assign(list(proposals), gts, threshold)
    for p, a in zip(proposals, assignments):
        x = pooled_roi_vector(
            feats, p.segment, video, cfg.roi_bins, cfg.context_ratio, cfg.samples_per_bin
        )
        dc, dl = a.offset_target if a.offset_target is not None else (0.0, 0.0)
        rows.append((x, dc, dl, a.target_iou))
    return rows


def fit_linear_cascade(
    proposals_by_video: dict[str, list[Proposal]],
    feats_by_video: dict[str, FeatureSequence],
    videos: dict[str, VideoRecord],
    thresholds: Sequence[float] = (0.5, 0.6, 0.7),
    ridge: float = 1e-3,
    roi_bins: int = 16,
    context_ratio: float = 0.5,
    samples_per_bin: int = 2,
    fuse_scores: bool = False,
) -> CascadeConfig:
    """Fit the cascade stage by stage on decoded training proposals.

    Stage k is fitted on the proposals produced by stages 1..k-1 (stage 1 on
    the raw input), using that stage's positive threshold for assignment;
    offsets for negatives regress to zero movement.
    """
    base = CascadeConfig(
        stages=tuple((RefinerParams(np.zeros((3, 1)), np.zeros(3)), t) for t in thresholds),
        roi_bins=roi_bins,
        context_ratio=context_ratio,
        samples_per_bin=samples_per_bin,
        fuse_scores=fuse_scores,
    )
    current = {vid: list(props) for vid, props in proposals_by_video.items()}
    fitted: list[tuple[RefinerParams | RefinerFn, float]] = []
    for threshold in thresholds:
        rows: list[tuple[np.ndarray, float, float, float]] = []
        for vid in sorted(current):
            video = videos[vid]
            rows.extend(
                _stage_training_rows(
                    current[vid], video.gt_segments, threshold, feats_by_video[vid], video, base
                )
            )
        params = fit_linear_refiner(rows, ridge=ridge)
        stage_cfg = CascadeConfig(
            stages=((params, threshold),),
            roi_bins=roi_bins,
            context_ratio=context_ratio,
            samples_per_bin=samples_per_bin,
            fuse_scores=fuse_scores,
        )
        for vid in sorted(current):
            current[vid] = refine_stage(
                current[vid], params, feats_by_video[vid], stage_cfg, videos[vid]
            )
        fitted.append((params, threshold))
    return CascadeConfig(
        stages=tuple(fitted),
        roi_bins=roi_bins,
        context_ratio=context_ratio,
        samples_per_bin=samples_per_bin,
        fuse_scores=fuse_scores,
    )
