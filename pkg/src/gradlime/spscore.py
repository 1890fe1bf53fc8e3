"""From pixel scores to ranked superpixels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import micronet as mn
from .saliency import pixel_scores
from .segmentation import QuickShiftParams, SegmentMap, SlicParams, quickshift_2d, slic_2d, slic_3d


@dataclass
class SegmentRanking:
    """Segment ids ordered by descending weight, ties by ascending id."""

    ids: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_weights(cls, weights) -> "SegmentRanking":
        weights = np.asarray(weights, np.float64)
        ids = np.arange(len(weights))
        order = np.lexsort((ids, -weights))
        return cls(ids[order], weights[order])

    def __len__(self):
        return len(self.ids)

    def top(self, k: int) -> np.ndarray:
        return self.ids[:k]

    def weight_of(self) -> np.ndarray:
        """Weights indexed by segment id."""
        out = np.empty(len(self.ids))
        out[self.ids] = self.weights
        return out

    def rows(self):
        """(segment_id, weight, rank) triples, rank starting at 1."""
        return [(int(s), float(w), r) for r, (s, w) in enumerate(zip(self.ids, self.weights), start=1)]


_REDUCERS = ("sum", "mean", "max")


def segment_weights(saliency: np.ndarray, seg: SegmentMap, reduce: str = "sum") -> np.ndarray:
    """Per-segment weight of a saliency map, accumulated in float64.

    ``sum`` (of absolute values) is the scoring rule; ``mean`` and ``max`` are
    experimental alternatives.
    """
    if saliency.shape != seg.labels.shape:
        raise ValueError(f"saliency shape {saliency.shape} != segment map shape {seg.labels.shape}")
    mags = np.abs(saliency.astype(np.float64)).ravel()
    labels = seg.labels.ravel()
    if reduce == "sum":
        return np.bincount(labels, mags, seg.n_segments)
    if reduce == "mean":
        return np.bincount(labels, mags, seg.n_segments) / np.maximum(seg.sizes, 1)
    if reduce == "max":
        out = np.zeros(seg.n_segments)
        np.maximum.at(out, labels, mags)
        return out
    raise ValueError(f"reduce must be one of {_REDUCERS}")


def aggregate(saliency: np.ndarray, seg: SegmentMap, reduce: str = "sum") -> SegmentRanking:
    return SegmentRanking.from_weights(segment_weights(saliency, seg, reduce))


def render_explanation(image: np.ndarray, seg: SegmentMap, ranking: SegmentRanking, top_k: int) -> np.ndarray:
    """Keep the pixels of the ``top_k`` best segments, black out the rest."""
    if not 1 <= top_k <= seg.n_segments:
        raise ValueError(f"top_k must lie in [1, {seg.n_segments}], got {top_k}")
    keep = np.zeros(seg.n_segments, bool)
    keep[ranking.top(top_k)] = True
    return np.where(keep[seg.labels][None], image, 0).astype(np.float32)


def segment(image: np.ndarray, params=None) -> SegmentMap:
    """Default segmenter per input kind: QuickShift for images, SLIC for clips."""
    if isinstance(params, SegmentMap):
        return params
    if image.ndim == 4:
        return slic_3d(image, params if isinstance(params, SlicParams) else SlicParams())
    if isinstance(params, SlicParams):
        return slic_2d(image, params)
    return quickshift_2d(image, params or QuickShiftParams())


@dataclass
class Explanation:
    segments: SegmentMap
    ranking: SegmentRanking
    saliency: np.ndarray
    image: np.ndarray


def explain(net: mn.Network, x: np.ndarray, target_class: int, method: str, seg_params=None, top_k: int = 5,
            reduce: str = "sum", source: str = "logit") -> Explanation:
    """Segment, score pixels, aggregate per segment and render the top ``top_k``.

    ``seg_params`` may also be a precomputed :class:`SegmentMap`.
    """
    seg = segment(x, seg_params)
    sal = pixel_scores(net, x, target_class, method, source)
    ranking = aggregate(sal, seg, reduce)
    return Explanation(seg, ranking, sal, render_explanation(x, seg, ranking, min(top_k, seg.n_segments)))
