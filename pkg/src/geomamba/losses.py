"""Training objectives: identity, hard-mining triplet, focal mask loss and
the weighted geometric-consistency / total assemblies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import Tensor, cross_entropy_logits, l2_distance_matrix, select_pairs

MASK_KEYS = ("opt_shallow", "opt_deep", "sar_shallow", "sar_deep")


@dataclass
class LossWeights:
    lambda_tri: float = 1.0
    margin: float = 0.3
    lambda_gcc: float = 0.5
    lambda_deep: float = 1.0
    lambda_shallow: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    label_smoothing: float = 0.1
    tri_normalize: bool = True

    def __post_init__(self):
        for name in ("lambda_tri", "margin", "lambda_gcc", "lambda_deep",
                     "lambda_shallow", "focal_alpha", "focal_gamma", "label_smoothing"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def triplet_loss(features: Tensor, labels: np.ndarray, margin: float = 0.3,
                 normalize: bool = False) -> tuple[Tensor, int]:
    """Batch-hard triplet loss over an (N,D) embedding matrix.

    Per anchor: hinge on (farthest same-label dist) - (nearest other-label
    dist) + margin. Anchors lacking a positive or a negative are skipped.
    Returns (mean loss over valid anchors, number of valid anchors).

    With `normalize`, rows are projected to the unit sphere first, which
    bounds pairwise distances to [0, 2] and keeps the margin meaningful for
    randomly initialized (unbounded) embeddings.
    """
    labels = np.asarray(labels)
    if normalize:
        norm = ((features * features).sum(axis=1, keepdims=True) + 1e-12).sqrt()
        features = features / norm
    n = features.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} embeddings")
    dist = l2_distance_matrix(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0), 0
    anchors = np.flatnonzero(valid)
    d = dist.data
    pos_idx = np.array([np.flatnonzero(pos_mask[i])[d[i, pos_mask[i]].argmax()] for i in anchors])
    neg_idx = np.array([np.flatnonzero(neg_mask[i])[d[i, neg_mask[i]].argmin()] for i in anchors])
    d_ap = select_pairs(dist, anchors, pos_idx)
    d_an = select_pairs(dist, anchors, neg_idx)
    return (d_ap - d_an + margin).relu().mean(), n_valid


def identity_loss(logits: Tensor, labels: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed mean cross-entropy over (N,K) class logits."""
    return cross_entropy_logits(logits, labels, smoothing=smoothing)


def focal_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss, mean over all pixels.

    -alpha_t * (1 - p_t)^gamma * log(p_t), with p_t the probability assigned
    to the true binary class and alpha_t = alpha for positives.
    """
    target = np.asarray(target, dtype=np.float64).reshape(logits.shape)
    y = Tensor(target)
    sign = Tensor(1.0 - 2.0 * target)          # +1 where y=0, -1 where y=1
    log_pt = -(logits * sign).softplus()       # stable log sigmoid(+/- z)
    p = logits.sigmoid()
    pt = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = Tensor(alpha * target + (1.0 - alpha) * (1.0 - target))
    term = alpha_t * log_pt
    if gamma != 0.0:
        term = term * ((1.0 - pt) ** gamma)
    return -term.mean()


def gcc_loss(mask_logits: Mapping[str, Tensor], targets: Mapping[str, np.ndarray],
             weights: LossWeights) -> Tensor:
    """Weighted sum of four focal terms over modality x {shallow, deep} heads.

    `targets` must already be downsampled to each logit map's resolution.
    """
    for key in MASK_KEYS:
        if key not in mask_logits or key not in targets:
            raise KeyError(f"missing mask/target for {key!r}")
    total = Tensor(0.0)
    for key in MASK_KEYS:
        w = weights.lambda_deep if key.endswith("deep") else weights.lambda_shallow
        if w == 0.0:
            continue
        total = total + w * focal_loss(mask_logits[key], targets[key],
                                       weights.focal_alpha, weights.focal_gamma)
    return total


def total_loss(retrieval: Tensor, gcc: Tensor, lambda_gcc: float) -> Tensor:
    return retrieval + lambda_gcc * gcc
