"""Decode per-video score bundles into ranked proposal sets.

A bundle carries the two per-cell boundary probability vectors and the two
dense (start, duration) confidence maps produced by a proposal-scoring model;
decoding enumerates every valid grid cell, fuses the four scores, and ranks
the resulting candidate segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Proposal, Segment, VideoRecord
from .errors import ContractViolation, FormatError
from .targets import valid_cell_mask

__all__ = ["ScoreBundle", "DecodeOpts", "fuse_confidence", "decode_proposals"]


@dataclass(frozen=True)
class ScoreBundle:
    """Decoded model outputs for one video, all on a shared grid of length d.

    Arrays are float32 (the on-disk precision): ``start_prob`` and
    ``end_prob`` are length-d vectors in [0, 1]; ``map_a`` and ``map_b`` are
    d x d (start, duration) maps in [0, 1] whose invalid triangle is zero.
    """

    d: int
    start_prob: np.ndarray
    end_prob: np.ndarray
    map_a: np.ndarray
    map_b: np.ndarray

    def __post_init__(self) -> None:
        if self.d < 2:
            raise FormatError(f"bundle grid length must be >= 2, got {self.d}")
        for name in ("start_prob", "end_prob", "map_a", "map_b"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name)), dtype=np.float32)
            object.__setattr__(self, name, arr)
        for name, shape in (
            ("start_prob", (self.d,)),
            ("end_prob", (self.d,)),
            ("map_a", (self.d, self.d)),
            ("map_b", (self.d, self.d)),
        ):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise FormatError(
                    f"bundle field {name} has shape {arr.shape}, expected {shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"bundle field {name} contains non-finite values")
            if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
                raise FormatError(f"bundle field {name} has values outside [0, 1]")
        dead = ~valid_cell_mask(self.d)
        for name in ("map_a", "map_b"):
            if np.any(getattr(self, name)[dead] != 0.0):
                raise FormatError(f"bundle field {name} is non-zero in the invalid triangle")


@dataclass(frozen=True)
class DecodeOpts:
    """Decoder knobs: candidate cap, score floor, peak gating, map exponent."""

    max_candidates: int = 1000
    min_score: float = 0.0
    peaks_only: bool = False
    gamma: float = 0.5

    def __post_init__(self) -> None:
        if self.max_candidates < 1:
            raise ContractViolation(f"max_candidates must be >= 1, got {self.max_candidates}")
        if self.min_score < 0:
            raise ContractViolation(f"min_score must be >= 0, got {self.min_score}")
        if self.gamma < 0:
            raise ContractViolation(f"gamma must be >= 0, got {self.gamma}")


def fuse_confidence(ps: float, pe: float, ma: float, mb: float, gamma: float = 0.5) -> float:
    """Fuse boundary and map confidences: ps * pe * (ma * mb) ** gamma.

    Monotone non-decreasing in every argument; inputs are expected in [0, 1].
    """
    return ps * pe * (ma * mb) ** gamma


def _peak_positions(v: np.ndarray) -> np.ndarray:
    """Cells strictly greater than their existing neighbors, or above half the max."""
    d = v.size
    peak = np.ones(d, dtype=bool)
    peak[1:] &= v[1:] > v[:-1]
    peak[:-1] &= v[:-1] > v[1:]
    return peak | (v > 0.5 * v.max(initial=0.0))


def decode_proposals(
    bundle: ScoreBundle, video: VideoRecord, opts: DecodeOpts = DecodeOpts()
) -> list[Proposal]:
    """Enumerate valid grid cells of a bundle into a ranked proposal list.

    Cell (i, dur) yields the segment spanning grid coordinates
    [i, i + dur + 1] with score
    ``fuse_confidence(start_prob[i], end_prob[min(i + dur + 1, d - 1)],
    map_a[i, dur], map_b[i, dur])``. Candidates scoring below ``min_score``
    are dropped, the rest are sorted by score descending (ties by start then
    end) and truncated to ``max_candidates``.
    """
    d = bundle.d
    ps = bundle.start_prob.astype(np.float64)
    pe = bundle.end_prob.astype(np.float64)
    ma = bundle.map_a.astype(np.float64)
    mb = bundle.map_b.astype(np.float64)

    i_idx = np.arange(d)[:, None]
    dur_idx = np.arange(d)[None, :]
    end_read = np.minimum(i_idx + dur_idx + 1, d - 1)
    scores = ps[:, None] * pe[end_read] * (ma * mb) ** opts.gamma

    keep = valid_cell_mask(d)
    if opts.peaks_only:
        start_ok = _peak_positions(ps)
        end_ok = _peak_positions(pe)
        keep = keep & start_ok[:, None] & end_ok[end_read]
    keep = keep & (scores >= opts.min_score)

    ii, dd = np.nonzero(keep)
    if ii.size == 0:
        return []
    sc = scores[ii, dd]
    starts = (ii / d) * video.duration_t
    ends = ((ii + dd + 1) / d) * video.duration_t
    order = np.lexsort((ends, starts, -sc))[: opts.max_candidates]
    return [
        Proposal(Segment(float(starts[k]), float(ends[k])), float(sc[k]), stage=0)
        for k in order
    ]
