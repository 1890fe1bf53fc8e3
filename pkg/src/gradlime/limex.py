"""LIME over superpixels: random on/off masks, median-filled perturbations,
kernel-weighted ridge regression on the class probability."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import micronet as mn
from .segmentation import SegmentMap
from .spscore import SegmentRanking
from .tensor import Prng

MEDIAN = "median"
ZERO = "zero"


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LimeConfig:
    n_samples: int = 1000
    kernel_width: float = 0.25  # math.inf gives a uniform kernel
    ridge_lambda: float = 1.0
    seed: int = 0
    batch_size: int = 16
    fill: str = MEDIAN
    rank_by: str = "signed"  # or "absolute"
    threads: int = 1


@dataclass
class LimeResult:
    coefficients: np.ndarray
    intercept: float
    ranking: SegmentRanking
    masks: np.ndarray
    targets: np.ndarray


def sample_masks(n: int, d: int, rng: Prng) -> np.ndarray:
    """``n`` x ``d`` binary masks; row 0 is all ones, the rest fair coin flips."""
    if d < 1:
        raise ValueError("need at least one segment")
    masks = np.ones((n, d), np.uint8)
    if n > 1:
        masks[1:] = (rng.random((n - 1) * d) < 0.5).reshape(n - 1, d)
    return masks


def fill_values(image: np.ndarray, fill: str) -> np.ndarray:
    """Per-channel fill colour for switched-off segments."""
    if fill == MEDIAN:
        return np.median(image.reshape(image.shape[0], -1), axis=1).astype(np.float32)
    if fill == ZERO:
        return np.zeros(image.shape[0], np.float32)
    raise ValueError(f"unknown fill {fill!r}")


def perturb_batch(image: np.ndarray, seg: SegmentMap, masks: np.ndarray, fill: str = MEDIAN) -> np.ndarray:
    """One perturbed copy of ``image`` per mask row."""
    masks = np.atleast_2d(masks)
    if masks.shape[1] != seg.n_segments:
        raise ValueError(f"mask length {masks.shape[1]} != n_segments {seg.n_segments}")
    keep = masks.astype(bool)[:, seg.labels]
    colour = fill_values(image, fill).reshape((1, -1) + (1,) * (image.ndim - 1))
    return np.where(keep[:, None], image[None], colour).astype(np.float32)


def perturb(image: np.ndarray, seg: SegmentMap, mask, fill: str = MEDIAN) -> np.ndarray:
    return perturb_batch(image, seg, np.asarray(mask)[None], fill)[0]


def kernel_weights(masks: np.ndarray, kernel_width: float) -> np.ndarray:
    """exp(-D^2 / width^2), D = cosine distance to the all-ones mask."""
    masks = np.atleast_2d(masks).astype(np.float64)
    d = masks.shape[1]
    on = masks.sum(axis=1)
    norm = np.sqrt((masks**2).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(norm > 0, 1.0 - on / (norm * np.sqrt(d)), 1.0)
    return np.exp(-(dist**2) / kernel_width**2)


def kernel_weight(mask, kernel_width: float) -> float:
    return float(kernel_weights(np.asarray(mask)[None], kernel_width)[0])


def fit_weighted_ridge(x, y, w, lam: float):
    """Minimise sum w_i (y_i - b0 - x_i.b)^2 + lam |b|^2 with an unpenalised intercept.

    Returns ``(coefficients, intercept)``.
    """
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    w = np.asarray(w, np.float64)
    if x.ndim != 2 or len(x) < 1 or len(y) != len(x) or len(w) != len(x):
        raise ValueError("need x [n, d] with matching y and w, n >= 1")
    if lam < 0:
        raise ValueError("ridge lambda must be >= 0")
    a = np.hstack([np.ones((len(x), 1)), x])
    aw = a * w[:, None]
    gram = a.T @ aw
    reg = np.full(a.shape[1], float(lam))
    reg[0] = 0.0
    gram[np.diag_indices_from(gram)] += reg
    rhs = aw.T @ y
    if lam == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SingularSystemError("normal equations are singular; use ridge_lambda > 0")
    try:
        theta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{exc}; use ridge_lambda > 0") from exc
    return theta[1:], float(theta[0])


def _scorer(model):
    if isinstance(model, mn.Network):
        return lambda batch: mn.forward(model, batch, keep_trace=False).probs
    return model


def score_masks(model, image, seg, masks, target_class, cfg: LimeConfig) -> np.ndarray:
    """Class probability of every perturbed image, in mask order."""
    scorer = _scorer(model)
    starts = range(0, len(masks), cfg.batch_size)

    def run(start):
        batch = perturb_batch(image, seg, masks[start : start + cfg.batch_size], cfg.fill)
        return np.asarray(scorer(batch))[:, target_class]

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts).astype(np.float64)


def lime_explain(model, image, seg: SegmentMap, target_class: int, cfg: LimeConfig = LimeConfig(),
                 masks=None) -> LimeResult:
    """Fit the local linear surrogate and rank segments by its coefficients.

    ``model`` is a :class:`Network` or any callable mapping a batch of inputs
    to class probabilities. ``masks`` overrides sampling (e.g. to enumerate).
    """
    if masks is None:
        masks = sample_masks(cfg.n_samples, seg.n_segments, Prng(cfg.seed))
    y = score_masks(model, image, seg, masks, target_class, cfg)
    w = kernel_weights(masks, cfg.kernel_width)
    coef, intercept = fit_weighted_ridge(masks, y, w, cfg.ridge_lambda)
    key = np.abs(coef) if cfg.rank_by == "absolute" else coef
    ranking = SegmentRanking.from_weights(key)
    return LimeResult(coef, intercept, ranking, masks, y)
