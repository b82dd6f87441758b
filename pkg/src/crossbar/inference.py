"""Sliding-window segmentation with one sub-model and the weighted majority
vote over a cascade's sub-models.

Any object with an ``orientation`` and a ``predict_labels(image, centers)``
method returning 0/1 per center can act as a model here.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .sampling import largest_component


@dataclass
class VoteConfig:
    stride: int = 1
    weights: Optional[Sequence[float]] = None  # None: use the ensemble's weights
    roi: Optional[tuple] = None  # (r0, r1, c0, c1), half-open
    keep_largest_component: bool = False

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.weights is not None and min(self.weights) <= 0:
            raise ValueError("vote weights must all be > 0")


@dataclass
class SegmentationResult:
    mask: np.ndarray
    votes: list = field(default_factory=list)  # one 0/1 map per model
    score: Optional[np.ndarray] = None  # summed weight of tumor votes


def _grid(n0, n1, stride):
    return np.arange(n0, n1, stride)


def _nearest(coords, start, stride, count):
    return np.clip(np.floor((coords - start) / stride + 0.5).astype(int), 0, count - 1)


def segment_single(model, image, config=None):
    """Center-pixel classification on the stride grid; off-grid pixels copy
    the nearest grid pixel and pixels outside the ROI stay background."""
    config = config or VoteConfig()
    h, w = image.shape
    r0, r1, c0, c1 = config.roi or (0, h, 0, w)
    rows, cols = _grid(r0, r1, config.stride), _grid(c0, c1, config.stride)
    centers = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)
    labels = np.asarray(model.predict_labels(image, centers)).reshape(len(rows), len(cols)).astype(bool)
    mask = np.zeros((h, w), dtype=bool)
    if config.stride == 1:
        mask[r0:r1, c0:c1] = labels
    else:
        ri = _nearest(np.arange(r0, r1), r0, config.stride, len(rows))
        ci = _nearest(np.arange(c0, c1), c0, config.stride, len(cols))
        mask[r0:r1, c0:c1] = labels[np.ix_(ri, ci)]
    return mask


def weighted_vote(labels, weights):
    """Tumor (1) iff the tumor votes outweigh the background votes; ties are
    background."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if labels.shape != weights.shape or labels.ndim != 1 or len(labels) == 0:
        raise ValueError(f"need equal-length non-empty labels and weights, got {labels.shape} and {weights.shape}")
    tumor = float(np.sum(weights * (labels == 1)))
    background = float(np.sum(weights * (labels != 1)))
    return int(tumor > background)


def vote_maps(label_maps, weights):
    """Pixelwise :func:`weighted_vote` over a stack of 0/1 maps.
    Returns ``(mask, score)``."""
    stack = np.asarray(label_maps).astype(bool)
    weights = np.asarray(weights, dtype=np.float64)
    if stack.shape[0] != len(weights):
        raise ValueError(f"{stack.shape[0]} label maps but {len(weights)} weights")
    score = np.tensordot(weights, stack.astype(np.float64), axes=1)
    background = np.tensordot(weights, (~stack).astype(np.float64), axes=1)
    return score > background, score


def segment_ensemble(ensemble, image, config=None):
    """Weighted vote of every sub-model's :func:`segment_single` mask.

    ``ensemble`` is a :class:`~crossbar.cascade.CascadeEnsemble` or anything
    with ``models`` and ``weights``.
    """
    config = config or VoteConfig()
    models = list(ensemble.models)
    if not models:
        raise ValueError("empty ensemble")
    weights = list(config.weights) if config.weights is not None else list(ensemble.weights)
    if len(weights) != len(models):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    votes = [segment_single(m, image, config) for m in models]
    mask, score = vote_maps(votes, weights)
    if config.keep_largest_component and mask.any():
        mask = largest_component(mask)
    return SegmentationResult(mask, votes, score.astype(np.float32))
