"""Numeric kernels: 1-D RoI align with exact gradient, resampling, nuclear norm.

Interpolation convention, used consistently by every kernel and its test
oracle: the value of feature column ``t`` lives at integer coordinate ``t``,
values between integers are linearly interpolated, and the signal tapers
linearly to zero over one cell beyond each end (zero at coordinates ``-1``
and ``T``, exactly zero outside ``[-1, T]``). This keeps bin averages
continuous in the region endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

__all__ = [
    "FeatureSequence",
    "roi_align_1d",
    "roi_align_1d_grad",
    "resize_linear",
    "resize_bilinear_map",
    "nuclear_norm",
]


@dataclass(frozen=True)
class FeatureSequence:
    """A channels-by-time matrix of real-valued features."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractViolation(f"features must be a C x T matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("features must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]


def _sample_positions(lo: float, hi: float, bins: int, samples_per_bin: int) -> np.ndarray:
    b = np.arange(bins, dtype=np.float64)[:, None]
    s = (np.arange(samples_per_bin, dtype=np.float64)[None, :] + 0.5) / samples_per_bin
    return lo + (hi - lo) * (b + s) / bins


def _interp_weights(pos: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left knot index, its weight, and validity masks for each position.

    Positions use the zero-tapered convention: knots at integers 0..T-1 carry
    the data, virtual zero knots sit at -1 and T.
    """
    x0 = np.floor(pos).astype(np.int64)
    w1 = pos - x0
    w0 = 1.0 - w1
    inside = (pos > -1.0) & (pos < t)
    left_valid = inside & (x0 >= 0)
    right_valid = inside & (x0 + 1 <= t - 1)
    return x0, w0 * left_valid, w1 * right_valid


def roi_align_1d(
    feats: FeatureSequence,
    region: tuple[float, float],
    bins: int,
    samples_per_bin: int = 2,
) -> np.ndarray:
    """Average-pool a fractional region of a feature sequence into fixed bins.

    Each bin averages ``samples_per_bin`` interpolated samples placed at bin
    sub-cell centers. The region is in feature coordinates and may extend past
    the sequence; out-of-range samples read as zero.
    """
    lo, hi = float(region[0]), float(region[1])
    if bins < 1:
        raise ContractViolation(f"bins must be >= 1, got {bins}")
    if samples_per_bin < 1:
        raise ContractViolation(f"samples_per_bin must be >= 1, got {samples_per_bin}")
    if not lo < hi:
        raise ContractViolation(f"region needs lo < hi, got ({lo}, {hi})")

    t = feats.length
    pos = _sample_positions(lo, hi, bins, samples_per_bin)
    x0, w0, w1 = _interp_weights(pos, t)
    i0 = np.clip(x0, 0, t - 1)
    i1 = np.clip(x0 + 1, 0, t - 1)
    vals = feats.data[:, i0] * w0 + feats.data[:, i1] * w1  # (C, bins, samples)
    return vals.mean(axis=2)


def roi_align_1d_grad(
    feats: FeatureSequence,
    region: tuple[float, float],
    bins: int,
    samples_per_bin: int,
    upstream: np.ndarray,
) -> np.ndarray:
    """Exact adjoint of :func:`roi_align_1d` with respect to the features."""
    lo, hi = float(region[0]), float(region[1])
    if bins < 1:
        raise ContractViolation(f"bins must be >= 1, got {bins}")
    if not lo < hi:
        raise ContractViolation(f"region needs lo < hi, got ({lo}, {hi})")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (feats.channels, bins):
        raise ContractViolation(
            f"upstream must have shape {(feats.channels, bins)}, got {upstream.shape}"
        )

    t = feats.length
    pos = _sample_positions(lo, hi, bins, samples_per_bin)
    x0, w0, w1 = _interp_weights(pos, t)
    i0 = np.clip(x0, 0, t - 1)
    i1 = np.clip(x0 + 1, 0, t - 1)

    grad = np.zeros((feats.channels, t), dtype=np.float64)
    per_sample = upstream[:, :, None] / samples_per_bin  # (C, bins, 1)
    contrib0 = per_sample * w0[None, :, :]  # (C, bins, samples)
    contrib1 = per_sample * w1[None, :, :]
    idx0 = i0.ravel()
    idx1 = i1.ravel()
    for c in range(feats.channels):
        np.add.at(grad[c], idx0, contrib0[c].ravel())
        np.add.at(grad[c], idx1, contrib1[c].ravel())
    return grad


def _linear_resample_weights(
    n: int, m: int, align_corners: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and blend weight for resampling n samples to m.

    Default is the align-centers convention: output sample k reads source
    coordinate ``(k + 0.5) * n / m - 0.5``, clamped to the valid range, which
    is the identity at m == n and never overshoots the data range.
    """
    if align_corners and m > 1 and n > 1:
        src = np.arange(m, dtype=np.float64) * (n - 1) / (m - 1)
    else:
        src = (np.arange(m, dtype=np.float64) + 0.5) * n / m - 0.5
    src = np.clip(src, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = src - i0
    return i0, i1, w


def resize_linear(v: np.ndarray, m: int, align_corners: bool = False) -> np.ndarray:
    """Resample a vector to length m by linear interpolation."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ContractViolation(f"expected a non-empty vector, got shape {v.shape}")
    if m < 1:
        raise ContractViolation(f"target length must be >= 1, got {m}")
    i0, i1, w = _linear_resample_weights(v.size, m, align_corners)
    return v[i0] * (1.0 - w) + v[i1] * w


def resize_bilinear_map(mapm: np.ndarray, d_new: int, align_corners: bool = False) -> np.ndarray:
    """Resample a square map to d_new x d_new, separably along rows then columns."""
    mapm = np.asarray(mapm, dtype=np.float64)
    if mapm.ndim != 2 or mapm.shape[0] != mapm.shape[1] or mapm.shape[0] < 1:
        raise ContractViolation(f"expected a square map, got shape {mapm.shape}")
    if d_new < 1:
        raise ContractViolation(f"target size must be >= 1, got {d_new}")
    i0, i1, w = _linear_resample_weights(mapm.shape[0], d_new, align_corners)
    rows = mapm[:, i0] * (1.0 - w) + mapm[:, i1] * w
    return rows[i0, :] * (1.0 - w)[:, None] + rows[i1, :] * w[:, None]


def nuclear_norm(a: np.ndarray) -> float:
    """Sum of singular values, via the eigenvalues of the smaller Gram matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ContractViolation(f"expected a B x C matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation("nuclear_norm requires finite entries")
    gram = a @ a.T if a.shape[0] <= a.shape[1] else a.T @ a
    eigvals = np.linalg.eigvalsh(gram)
    return float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())
