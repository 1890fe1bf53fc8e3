"""Superpixels and supervoxels: SLIC (2D and 3D) and QuickShift (2D).

Every segmenter returns a :class:`SegmentMap` whose labels are dense in
``[0, n_segments)`` and whose segments are single 4-connected (2D) or
6-connected (3D) components.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import read_tensor, rgb_to_lab, write_tensor, atomic_write_bytes


@dataclass
class SegmentMap:
    labels: np.ndarray  # int64, spatial shape of the input
    n_segments: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_segments)


@dataclass(frozen=True)
class SlicParams:
    k: int = 50
    compactness: float = 10.0
    max_iters: int = 10
    min_size_factor: float = 0.25
    seed: int = 0


@dataclass(frozen=True)
class QuickShiftParams:
    ratio: float = 0.5
    kernel_size: float = 3.0
    max_dist: float = 6.0
    min_size: int = 8  # fragments smaller than this merge into a neighbour
    seed: int = 0


# -- connectivity ----------------------------------------------------------------------

def _as3d(labels):
    return labels.reshape((1,) * (3 - labels.ndim) + labels.shape)


def relabel_compact(labels: np.ndarray) -> SegmentMap:
    """Renumber labels 0..n-1 in order of first appearance (scan order)."""
    flat = labels.ravel()
    uniq, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return SegmentMap(rank[inverse].reshape(labels.shape), len(uniq))


def _adjacency(comp3, n):
    """CSR neighbour lists of the components in ``comp3`` (face adjacency)."""
    codes = []
    for axis in range(3):
        if comp3.shape[axis] < 2:
            continue
        a = np.take(comp3, np.arange(comp3.shape[axis] - 1), axis=axis).ravel()
        b = np.take(comp3, np.arange(1, comp3.shape[axis]), axis=axis).ravel()
        diff = a != b
        a, b = a[diff].astype(np.int64), b[diff].astype(np.int64)
        codes += [a * n + b, b * n + a]
    codes = np.unique(np.concatenate(codes)) if codes else np.zeros(0, np.int64)
    indptr = np.searchsorted(codes // n, np.arange(n + 1))
    return indptr, codes % n


def enforce_connectivity(labels: np.ndarray, min_size: float = 1, backend=None) -> SegmentMap:
    """Split every label into its connected components, then merge components
    smaller than ``min_size`` into their largest neighbour.

    Components are visited in scan order of their first pixel; a component
    that is still too small when visited joins the largest adjacent group
    (ties go to the group whose first pixel comes first).
    """
    labels = np.asarray(labels)
    comp = kernels.pick("components", backend)(np.ascontiguousarray(_as3d(labels)))
    n = int(comp.max()) + 1
    sizes = np.bincount(comp.ravel(), minlength=n)
    small = np.flatnonzero(sizes < min_size)
    if len(small) == 0 or n == 1:
        return SegmentMap(comp.reshape(labels.shape), n)

    indptr, adj = _adjacency(comp, n)
    parent = list(range(n))
    size = sizes.tolist()
    neighbours = {}  # root -> set of component ids, built on first use

    def nbrs(r):
        if r not in neighbours:
            neighbours[r] = set(adj[indptr[r] : indptr[r + 1]].tolist())
        return neighbours[r]

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for c in small.tolist():
        root = find(c)
        if size[root] >= min_size:
            continue
        cands = {find(v) for v in nbrs(root)} - {root}
        if not cands:
            continue
        target = min(cands, key=lambda r: (-size[r], r))
        parent[root] = target
        size[target] += size[root]
        nbrs(target).update(neighbours.pop(root))
    roots = np.array(parent)
    while True:  # pointer jumping until every entry names its root
        nxt = roots[roots]
        if np.array_equal(nxt, roots):
            break
        roots = nxt
    return relabel_compact(roots[comp].reshape(labels.shape))


# -- SLIC ---------------------------------------------------------------------------------

def _grid_counts(dims, k):
    """Centres per axis: near-isotropic cells whose count is close to ``k``."""
    nd = len(dims)
    step = (float(np.prod(dims)) / k) ** (1.0 / nd)
    ranges = [range(1, min(d, k) + 1) for d in dims]
    best = None
    for counts in itertools.product(*ranges):
        prod = math.prod(counts)
        if prod > 2 * k or 2 * prod < k:
            continue
        aniso = sum(math.log(d / c / step) ** 2 for d, c in zip(dims, counts))
        cost = aniso + 20.0 * math.log(prod / k) ** 2
        key = (round(cost, 9), max(counts), counts)
        if best is None or key < best:
            best = key
    if best is None:
        return tuple(1 for _ in dims)
    return best[2]


def _gradient_energy(lab3):
    g = np.zeros(lab3.shape[1:])
    for axis in range(1, 4):
        n = lab3.shape[axis]
        if n < 2:
            continue
        idx = np.arange(n)
        fwd = np.take(lab3, np.minimum(idx + 1, n - 1), axis=axis)
        bwd = np.take(lab3, np.maximum(idx - 1, 0), axis=axis)
        g += ((fwd - bwd) ** 2).sum(axis=0)
    return g


def _slic_core(lab3, p: SlicParams, ndim, backend=None):
    """SLIC clustering on a [3, T, H, W] Lab volume. Returns (labels, centres).

    Centres are rows of (l, a, b, t, y, x).
    """
    dims3 = lab3.shape[1:]
    dims = dims3[-ndim:]
    npix = int(np.prod(dims3))
    if not 1 <= p.k <= npix:
        raise ValueError(f"k must lie in [1, {npix}], got {p.k}")
    if p.compactness <= 0:
        raise ValueError("compactness must be positive")
    step = (npix / p.k) ** (1.0 / ndim)
    counts = (1,) * (3 - ndim) + _grid_counts(dims, p.k)
    axes = [(np.arange(c) + 0.5) * (d / c) - 0.5 for d, c in zip(dims3, counts)]
    pos = np.array(list(itertools.product(*axes)), np.float64)

    grad = _gradient_energy(lab3)
    centres = np.empty((len(pos), 6))
    for i, c in enumerate(pos):
        pix = np.floor(c + 0.5).astype(np.int64)
        here = grad[tuple(pix)]
        best_val, best_pix = here, None
        ranges = [range(max(0, q - 1), min(d, q + 2)) if d > 1 else range(q, q + 1) for q, d in zip(pix, dims3)]
        for cand in itertools.product(*ranges):
            if grad[cand] < best_val:
                best_val, best_pix = grad[cand], cand
        if best_pix is not None:
            pix = np.array(best_pix)
            c = pix.astype(np.float64)
        centres[i, :3] = lab3[(slice(None),) + tuple(pix)]
        centres[i, 3:] = c

    feat = lab3.reshape(3, -1).T.astype(np.float64)
    coords = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims3], indexing="ij"), -1).reshape(-1, 3)
    cell = np.array([d / c for d, c in zip(dims3, counts)])
    radius = np.maximum(step, cell)
    radius[np.array(dims3) == 1] = np.inf
    spatial_weight = (p.compactness / step) ** 2
    assign = kernels.pick("slic_assign", backend)
    labels = None
    for _ in range(max(1, p.max_iters)):
        labels = assign(feat, coords, centres, radius, spatial_weight)
        lost = np.flatnonzero(labels < 0)
        if len(lost):
            dc = ((feat[lost, None, :] - centres[None, :, :3]) ** 2).sum(-1)
            ds = ((coords[lost, None, :] - centres[None, :, 3:]) ** 2).sum(-1)
            labels[lost] = np.argmin(dc + spatial_weight * ds, axis=1)
        cnt = np.bincount(labels, minlength=len(centres))
        keep = cnt > 0
        for j in range(3):
            centres[keep, j] = np.bincount(labels, feat[:, j], len(centres))[keep] / cnt[keep]
            centres[keep, 3 + j] = np.bincount(labels, coords[:, j], len(centres))[keep] / cnt[keep]
    return labels.reshape(dims3), centres


def slic_2d(image: np.ndarray, p: SlicParams = SlicParams(), backend=None) -> SegmentMap:
    """SLIC superpixels of a [3, H, W] image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {image.shape}")
    lab = rgb_to_lab(image)[:, None]
    raw, _ = _slic_core(lab, p, 2, backend)
    h, w = image.shape[1:]
    return enforce_connectivity(raw[0], p.min_size_factor * h * w / p.k, backend)


def slic_3d(volume: np.ndarray, p: SlicParams = SlicParams(), backend=None) -> SegmentMap:
    """SLIC supervoxels of a [3, T, H, W] clip; segments may span frames."""
    if volume.ndim != 4 or volume.shape[0] != 3:
        raise ValueError(f"expected [3,T,H,W], got {volume.shape}")
    lab = rgb_to_lab(volume)
    raw, _ = _slic_core(lab, p, 3, backend)
    return enforce_connectivity(raw, p.min_size_factor * raw.size / p.k, backend)


# -- QuickShift ----------------------------------------------------------------------------

def quickshift_density(image, p: QuickShiftParams, backend=None):
    """(features [H*W, 5], density [H*W]) used by the linking step."""
    lab = rgb_to_lab(image).astype(np.float64)
    h, w = image.shape[1:]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    feat = np.concatenate([p.ratio * lab.reshape(3, -1), yy.reshape(1, -1), xx.reshape(1, -1)]).T.copy()
    radius = int(3 * p.kernel_size)
    dens = kernels.pick("qs_density", backend)(feat, h, w, radius, 1.0 / (2.0 * p.kernel_size**2))
    # quantise so that symmetric sums accumulated in different orders tie exactly
    return feat, np.round(dens, 9)


def quickshift_2d(image: np.ndarray, p: QuickShiftParams = QuickShiftParams(), backend=None) -> SegmentMap:
    """QuickShift superpixels of a [3, H, W] image.

    Each pixel links to the nearest (in feature space) pixel within
    ``max_dist`` that ranks higher, where rank is density with ties going to
    the lower linear index. Trees of the resulting forest are split into
    connected components, and fragments under ``min_size`` pixels merge into
    their largest neighbour.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {image.shape}")
    if p.kernel_size <= 0 or p.max_dist < 0 or not 0 < p.ratio <= 1 or p.min_size < 1:
        raise ValueError(f"invalid QuickShift parameters {p}")
    h, w = image.shape[1:]
    if int(3 * p.kernel_size) < 1:
        return SegmentMap(np.arange(h * w, dtype=np.int64).reshape(h, w), h * w)
    feat, dens = quickshift_density(image, p, backend)
    parent = kernels.pick("qs_parents", backend)(feat, dens, h, w, int(p.max_dist), float(p.max_dist) ** 2)
    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    return enforce_connectivity(root.reshape(h, w), p.min_size, backend)


# -- persistence ---------------------------------------------------------------------------

def save_segmap(path, seg: SegmentMap) -> None:
    """STF1 raster of float labels plus ``<path>.n`` holding n_segments."""
    write_tensor(path, seg.labels.astype(np.float32))
    atomic_write_bytes(f"{path}.n", f"{seg.n_segments}\n".encode())


def load_segmap(path) -> SegmentMap:
    labels = read_tensor(path).astype(np.int64)
    try:
        with open(f"{path}.n") as fh:
            n = int(fh.readline())
    except FileNotFoundError:
        n = int(labels.max()) + 1
    return SegmentMap(labels, n)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels whose right or lower neighbour carries a different label."""
    edge = np.zeros(labels.shape, bool)
    edge[..., :-1] |= labels[..., :-1] != labels[..., 1:]
    edge[..., :-1, :] |= labels[..., :-1, :] != labels[..., 1:, :]
    return edge


def preview(image: np.ndarray, seg: SegmentMap) -> np.ndarray:
    """Each segment painted with its mean colour, boundaries darkened."""
    flat = image.reshape(3, -1)
    sizes = np.maximum(seg.sizes, 1)
    means = np.stack([np.bincount(seg.labels.ravel(), flat[c], seg.n_segments) / sizes for c in range(3)])
    out = means[:, seg.labels].astype(np.float32)
    out[:, boundary_mask(seg.labels)] *= 0.25
    return out
