"""Rank superpixels with single-pass gradient saliency and compare against LIME."""
from .limex import LimeConfig, lime_explain
from .micronet import Network, NetworkSpec, init_weights, load_network, save_network, train_sgd
from .saliency import METHODS, pixel_scores
from .segmentation import QuickShiftParams, SegmentMap, SlicParams, quickshift_2d, slic_2d, slic_3d
from .spscore import SegmentRanking, aggregate, explain

__version__ = "0.1.0"

__all__ = [
    "LimeConfig", "lime_explain", "Network", "NetworkSpec", "init_weights", "load_network", "save_network",
    "train_sgd", "METHODS", "pixel_scores", "QuickShiftParams", "SegmentMap", "SlicParams", "quickshift_2d",
    "slic_2d", "slic_3d", "SegmentRanking", "aggregate", "explain",
]
