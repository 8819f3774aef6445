"""Model fusion: bundle-level averaging, proposal-set fusion, and adaptive
classifier weighting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Proposal, Segment, pairwise_tiou
from .decode import ScoreBundle
from .errors import ContractViolation, NumericalError
from .numerics import resize_bilinear_map, resize_linear
from .postprocess import SoftNmsConfig, soft_nms
from .targets import valid_cell_mask

__all__ = [
    "ModelWeights",
    "LogitsBatch",
    "ensemble_bundles",
    "fuse_proposal_sets",
    "fit_adaptive_weights",
    "classify_ensemble",
]


@dataclass(frozen=True)
class ModelWeights:
    """Positive per-model weights; normalize() yields a convex combination."""

    w: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if arr.size < 1:
            raise ContractViolation("weights must be non-empty")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ContractViolation(f"weights must be finite and positive, got {arr}")
        object.__setattr__(self, "w", arr)

    def __len__(self) -> int:
        return self.w.size

    def normalized(self) -> np.ndarray:
        return self.w / self.w.sum()


@dataclass(frozen=True)
class LogitsBatch:
    """Pre-softmax outputs of N models over B samples and K classes."""

    values: np.ndarray  # (N, B, K)

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ContractViolation(f"logits must be (N, B, K), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("logits must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def n_models(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def n_classes(self) -> int:
        return self.values.shape[2]


def ensemble_bundles(
    bundles: Sequence[ScoreBundle], w: ModelWeights, d_target: int
) -> ScoreBundle:
    """Convex-combine score bundles on a common grid.

    Vectors are resampled with linear interpolation and maps bilinearly; the
    combination uses normalized weights, re-zeroes the invalid triangle, and
    clamps to [0, 1]. A single bundle already on the target grid passes
    through bit-identically.
    """
    if not bundles:
        raise ContractViolation("bundle ensemble needs at least one bundle")
    if len(bundles) != len(w):
        raise ContractViolation(
            f"got {len(bundles)} bundles but {len(w)} weights"
        )
    weights = w.normalized()
    start = np.zeros(d_target, dtype=np.float64)
    end = np.zeros(d_target, dtype=np.float64)
    map_a = np.zeros((d_target, d_target), dtype=np.float64)
    map_b = np.zeros((d_target, d_target), dtype=np.float64)
    for wk, bundle in zip(weights, bundles):
        start += wk * resize_linear(bundle.start_prob.astype(np.float64), d_target)
        end += wk * resize_linear(bundle.end_prob.astype(np.float64), d_target)
        map_a += wk * resize_bilinear_map(bundle.map_a.astype(np.float64), d_target)
        map_b += wk * resize_bilinear_map(bundle.map_b.astype(np.float64), d_target)
    dead = ~valid_cell_mask(d_target)
    map_a[dead] = 0.0
    map_b[dead] = 0.0
    return ScoreBundle(
        d=d_target,
        start_prob=np.clip(start, 0.0, 1.0),
        end_prob=np.clip(end, 0.0, 1.0),
        map_a=np.clip(map_a, 0.0, 1.0),
        map_b=np.clip(map_b, 0.0, 1.0),
    )


def fuse_proposal_sets(
    sets: Sequence[Sequence[Proposal]],
    w: ModelWeights,
    nms: SoftNmsConfig = SoftNmsConfig(),
    merge_tiou: float = 0.95,
) -> list[Proposal]:
    """Fuse proposal sets from several models by weighted summation.

    Every proposal's score is scaled by its model's normalized weight. Near
    duplicates across models (pairwise tIoU >= ``merge_tiou`` with the
    cluster leader) merge into one proposal whose score is the sum of the
    member scores and whose endpoints are their score-weighted average.
    Soft-NMS then ranks the fused set.
    """
    if len(sets) != len(w):
        raise ContractViolation(f"got {len(sets)} proposal sets but {len(w)} weights")
    weights = w.normalized()
    pool: list[tuple[int, Segment, float, int | None, int]] = []
    for model, (wk, props) in enumerate(zip(weights, sets)):
        for p in props:
            pool.append((model, p.segment, wk * p.score, p.class_id, p.stage))
    if not pool:
        return []

    order = sorted(
        range(len(pool)),
        key=lambda k: (-pool[k][2], pool[k][1].start, pool[k][1].end, pool[k][0]),
    )
    segs = np.array([(e[1].start, e[1].end) for e in pool], dtype=np.float64)
    used = np.zeros(len(pool), dtype=bool)
    fused: list[Proposal] = []
    for pos, k in enumerate(order):
        if used[k]:
            continue
        used[k] = True
        leader = pool[k]
        members = [k]
        taken_models = {leader[0]}
        for j in order[pos + 1 :]:
            if used[j] or pool[j][0] in taken_models:
                continue
            if pairwise_tiou(segs[k], segs[j])[0, 0] >= merge_tiou:
                used[j] = True
                taken_models.add(pool[j][0])
                members.append(j)
        total = sum(pool[j][2] for j in members)
        if total > 0:
            lo = sum(pool[j][2] * pool[j][1].start for j in members) / total
            hi = sum(pool[j][2] * pool[j][1].end for j in members) / total
        else:
            lo, hi = leader[1].start, leader[1].end
        fused.append(
            Proposal(
                Segment(lo, hi),
                min(1.0, total),
                class_id=leader[3],
                stage=leader[4],
            )
        )
    return soft_nms(fused, sigma=nms.sigma, min_score=nms.min_score, top_k=nms.top_k)


def _ensemble_loss_and_grad(
    logits: np.ndarray, labels: np.ndarray, w: np.ndarray
) -> tuple[float, np.ndarray]:
    combined = np.einsum("n,nbk->bk", w, logits)
    shifted = combined - combined.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    b = np.arange(labels.size)
    log_probs = shifted - np.log(expv.sum(axis=1, keepdims=True))
    loss = float(-log_probs[b, labels].mean())
    delta = probs
    delta[b, labels] -= 1.0
    grad = np.einsum("nbk,bk->n", logits, delta) / labels.size
    return loss, grad


def fit_adaptive_weights(
    lb: LogitsBatch,
    labels: Sequence[int],
    lr: float = 0.01,
    iters: int = 100,
) -> ModelWeights:
    """Fit per-model weights by gradient descent on ensemble cross-entropy.

    Weights start at one, are updated with plain gradient steps, and are
    clipped to at least 1e-3 after every step. Raises if the loss diverges.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (lb.n_samples,):
        raise ContractViolation(
            f"labels must have shape ({lb.n_samples},), got {labels.shape}"
        )
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= lb.n_classes:
        raise ContractViolation("labels must be valid class ids")
    if iters < 0:
        raise ContractViolation(f"iters must be >= 0, got {iters}")
    w = np.ones(lb.n_models, dtype=np.float64)
    for _ in range(iters):
        loss, grad = _ensemble_loss_and_grad(lb.values, labels, w)
        if not np.isfinite(loss):
            raise NumericalError("ensemble weight fitting diverged; lower the learning rate")
        w = np.maximum(w - lr * grad, 1e-3)
    loss, _ = _ensemble_loss_and_grad(lb.values, labels, w)
    if not np.isfinite(loss):
        raise NumericalError("ensemble weight fitting diverged; lower the learning rate")
    return ModelWeights(w)


def classify_ensemble(lb: LogitsBatch, w: ModelWeights, k: int) -> list[list[int]]:
    """Per-sample top-k classes of the weighted-logit softmax ensemble.

    Ties break toward the lower class id.
    """
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if k > lb.n_classes:
        raise ContractViolation(f"k={k} exceeds the number of classes {lb.n_classes}")
    if len(w) != lb.n_models:
        raise ContractViolation(f"got {lb.n_models} models but {len(w)} weights")
    combined = np.einsum("n,nbk->bk", np.asarray(w.w, dtype=np.float64), lb.values)
    order = np.argsort(-combined, axis=1, kind="stable")
    return [list(map(int, row[:k])) for row in order]
