"""Hot loops, each with a numba version and a pure-numpy twin.

``pick(name, backend)`` returns the implementation to call; the backend
defaults to numba unless ``GRADLIME_DISABLE_JIT`` is set. Both versions of a
kernel must return bitwise-identical results (tests check this).
"""
from __future__ import annotations

import numpy as np

from ._jit import njit, use_jit

# -- col2im (3D; 2D callers pass T = kt = 1) --------------------------------------


@njit
def _col2im_nb(dcols, n, t, h, w, kt, kh, kw, c):
    out = np.zeros((n, t + kt - 1, h + kh - 1, w + kw - 1, c), dcols.dtype)
    for b in range(n):
        for z in range(t):
            for y in range(h):
                for x in range(w):
                    row = ((b * t + z) * h + y) * w + x
                    col = 0
                    for a in range(kt):
                        for i in range(kh):
                            for j in range(kw):
                                for ch in range(c):
                                    out[b, z + a, y + i, x + j, ch] += dcols[row, col]
                                    col += 1
    return out


def _col2im_np(dcols, n, t, h, w, kt, kh, kw, c):
    out = np.zeros((n, t + kt - 1, h + kh - 1, w + kw - 1, c), dcols.dtype)
    d = dcols.reshape(n, t, h, w, kt, kh, kw, c)
    for a, i, j in np.ndindex(kt, kh, kw):
        out[:, a : a + t, i : i + h, j : j + w] += d[:, :, :, :, a, i, j]
    return out


# -- SLIC assignment step ------------------------------------------------------------


@njit
def _slic_assign_nb(feat, coords, centers, radius, spatial_weight):
    # feat [P, F] colour, coords [P, D] positions, centers [K, F + D]
    npix = feat.shape[0]
    nf = feat.shape[1]
    nd = coords.shape[1]
    labels = np.full(npix, -1, np.int64)
    best = np.full(npix, np.inf)
    for k in range(centers.shape[0]):
        for p in range(npix):
            inside = True
            ds = 0.0
            for d in range(nd):
                delta = coords[p, d] - centers[k, nf + d]
                if abs(delta) > radius[d]:
                    inside = False
                    break
                ds += delta * delta
            if not inside:
                continue
            dc = 0.0
            for f in range(nf):
                delta = feat[p, f] - centers[k, f]
                dc += delta * delta
            dist = dc + spatial_weight * ds
            if dist < best[p]:
                best[p] = dist
                labels[p] = k
    return labels


def _slic_assign_np(feat, coords, centers, radius, spatial_weight):
    npix = feat.shape[0]
    nf = feat.shape[1]
    labels = np.full(npix, -1, np.int64)
    best = np.full(npix, np.inf)
    for k in range(centers.shape[0]):
        delta = coords - centers[k, nf:]
        inside = np.all(np.abs(delta) <= radius, axis=1)
        ds = np.zeros(npix)
        for d in range(coords.shape[1]):
            ds += delta[:, d] * delta[:, d]
        dc = np.zeros(npix)
        for f in range(nf):
            df = feat[:, f] - centers[k, f]
            dc += df * df
        dist = dc + spatial_weight * ds
        better = inside & (dist < best)
        best[better] = dist[better]
        labels[better] = k
    return labels


# -- QuickShift -------------------------------------------------------------------------


@njit
def _qs_density_nb(feat, h, w, radius, inv2s2):
    # feat [H*W, F] with the (y, x) position folded in as the last two columns
    nf = feat.shape[1]
    dens = np.zeros(h * w)
    for y in range(h):
        for x in range(w):
            p = y * w + x
            total = 0.0
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    q = yy * w + xx
                    d2 = 0.0
                    for f in range(nf):
                        delta = feat[p, f] - feat[q, f]
                        d2 += delta * delta
                    total += np.exp(-d2 * inv2s2)
            dens[p] = total
    return dens


def _qs_density_np(feat, h, w, radius, inv2s2):
    nf = feat.shape[1]
    grid = feat.reshape(h, w, nf)
    dens = np.zeros((h, w))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            if y0 >= y1 or x0 >= x1:
                continue
            a = grid[y0:y1, x0:x1]
            b = grid[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
            d2 = np.zeros((y1 - y0, x1 - x0))
            for f in range(nf):
                delta = a[..., f] - b[..., f]
                d2 += delta * delta
            dens[y0:y1, x0:x1] += np.exp(-d2 * inv2s2)
    return dens.ravel()


def _qs_parents_np(feat, dens, h, w, radius, max_dist2):
    nf = feat.shape[1]
    grid = feat.reshape(h, w, nf)
    dgrid = dens.reshape(h, w)
    idx = np.arange(h * w).reshape(h, w)
    parent = idx.copy()
    best = np.full((h, w), np.inf)
    best_idx = np.full((h, w), h * w)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            if y0 >= y1 or x0 >= x1 or (dy == 0 and dx == 0):
                continue
            a = grid[y0:y1, x0:x1]
            b = grid[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
            d2 = np.zeros((y1 - y0, x1 - x0))
            for f in range(nf):
                delta = a[..., f] - b[..., f]
                d2 += delta * delta
            di, dq = dgrid[y0:y1, x0:x1], dgrid[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
            ii, qq = idx[y0:y1, x0:x1], idx[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
            higher = (dq > di) | ((dq == di) & (qq < ii))
            cur_d, cur_i = best[y0:y1, x0:x1], best_idx[y0:y1, x0:x1]
            closer = (d2 < cur_d) | ((d2 == cur_d) & (qq < cur_i))
            take = higher & (d2 <= max_dist2) & closer
            cur_d[take] = d2[take]
            cur_i[take] = qq[take]
            parent[y0:y1, x0:x1][take] = qq[take]
    return parent.ravel()


@njit
def _qs_parents_nb(feat, dens, h, w, radius, max_dist2):
    nf = feat.shape[1]
    parent = np.arange(h * w)
    for y in range(h):
        for x in range(w):
            p = y * w + x
            best = np.inf
            best_q = h * w
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    q = yy * w + xx
                    if q == p:
                        continue
                    if not (dens[q] > dens[p] or (dens[q] == dens[p] and q < p)):
                        continue
                    d2 = 0.0
                    for f in range(nf):
                        delta = feat[p, f] - feat[q, f]
                        d2 += delta * delta
                    if d2 > max_dist2:
                        continue
                    if d2 < best or (d2 == best and q < best_q):
                        best = d2
                        best_q = q
            if best_q < h * w:
                parent[p] = best_q
    return parent


# -- connected components ------------------------------------------------------------------


@njit
def _components_nb(labels):
    # labels [T, H, W]; 6-connectivity (4-connectivity when T == 1)
    t, h, w = labels.shape
    comp = np.full((t, h, w), -1, np.int64)
    stack = np.empty(t * h * w, np.int64)
    n = 0
    for z0 in range(t):
        for y0 in range(h):
            for x0 in range(w):
                if comp[z0, y0, x0] >= 0:
                    continue
                lab = labels[z0, y0, x0]
                comp[z0, y0, x0] = n
                top = 0
                stack[top] = (z0 * h + y0) * w + x0
                top += 1
                while top > 0:
                    top -= 1
                    v = stack[top]
                    z = v // (h * w)
                    y = (v // w) % h
                    x = v % w
                    for k in range(6):
                        zz, yy, xx = z, y, x
                        if k == 0:
                            zz -= 1
                        elif k == 1:
                            zz += 1
                        elif k == 2:
                            yy -= 1
                        elif k == 3:
                            yy += 1
                        elif k == 4:
                            xx -= 1
                        else:
                            xx += 1
                        if zz < 0 or zz >= t or yy < 0 or yy >= h or xx < 0 or xx >= w:
                            continue
                        if comp[zz, yy, xx] >= 0 or labels[zz, yy, xx] != lab:
                            continue
                        comp[zz, yy, xx] = n
                        stack[top] = (zz * h + yy) * w + xx
                        top += 1
                n += 1
    return comp


def _components_np(labels):
    from scipy import ndimage

    structure = ndimage.generate_binary_structure(3, 1)
    comp = np.full(labels.shape, -1, np.int64)
    offset = 0
    for lab in np.unique(labels):
        cc, k = ndimage.label(labels == lab, structure=structure)
        mask = cc > 0
        comp[mask] = cc[mask] + offset - 1
        offset += k
    # renumber by first occurrence in scan order, matching the flood-fill kernel
    flat = comp.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(order), np.int64)
    remap[order] = np.arange(len(order))
    return remap[flat].reshape(labels.shape)


_KERNELS = {
    "col2im": (_col2im_nb, _col2im_np),
    "slic_assign": (_slic_assign_nb, _slic_assign_np),
    "qs_density": (_qs_density_nb, _qs_density_np),
    "qs_parents": (_qs_parents_nb, _qs_parents_np),
    "components": (_components_nb, _components_np),
}


def pick(name, backend=None):
    """The numba or numpy implementation of kernel ``name``."""
    compiled, fallback = _KERNELS[name]
    return compiled if use_jit(backend) else fallback


KERNEL_NAMES = tuple(_KERNELS)
