"""Low-rank denoising baselines on Casorati (voxel x DWI) matrices.

MPPCA picks each patch rank from the Marchenko-Pastur noise bulk; the
oracle variants pick the rank that minimizes the squared error against a
gold-standard image, either per patch (LPCA) or once for the whole volume
(GPCA).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import itertools
import warnings

import numpy as np


@dataclass(frozen=True)
class PatchConfig:
    patch_edge_mm: float = 12.5
    stride: int | None = None       # voxels; None -> half the patch edge

    def patch_shape(self, voxel_size, volume_shape):
        shape = []
        for vs, n in zip(voxel_size, volume_shape):
            p = max(1, int(round(self.patch_edge_mm / vs)))
            if p > n:
                warnings.warn(f"patch edge {p} voxels exceeds volume extent {n}; clamped", RuntimeWarning)
                p = n
            shape.append(p)
        return tuple(shape)

    def strides(self, patch_shape):
        if self.stride is not None:
            return tuple(max(1, int(self.stride)) for _ in patch_shape)
        return tuple(max(1, p // 2) for p in patch_shape)


def patch_starts(n, p, stride):
    """Start indices covering [0, n) with windows of length p; last window flush with the end."""
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def patch_grid(volume_shape, patch_shape, strides):
    axes = [patch_starts(n, p, s) for n, p, s in zip(volume_shape, patch_shape, strides)]
    return list(itertools.product(*axes))


def extract_casorati(x, start, patch_shape):
    """(voxels-in-patch, nd) matrix from an image stack (nd, n1, n2, n3)."""
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch_shape))
    block = x[(slice(None),) + sl]
    return block.reshape(x.shape[0], -1).T


def insert_casorati(out, m, start, patch_shape):
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch_shape))
    out[(slice(None),) + sl] = m.T.reshape((out.shape[0],) + tuple(patch_shape))


def svd_truncate(m, r):
    """Best rank-r approximation in the Frobenius norm."""
    m = np.asarray(m)
    if not 0 <= r <= min(m.shape):
        raise ValueError(f"rank {r} outside [0, {min(m.shape)}]")
    if r == 0:
        return np.zeros_like(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return (u[:, :r] * s[:r]) @ vt[:r]


# 99% quantile of the Tracy-Widom (GOE) law of the largest noise eigenvalue
TW1_Q99 = 2.0234


def mp_upper_edge(p, n, tw_quantile=TW1_Q99):
    """Finite-sample upper edge of the noise bulk of M^T M / n, in units of sigma^2.

    Asymptotically (1 + sqrt(p/n))^2; here the Johnstone centering plus
    ``tw_quantile`` Tracy-Widom scale units, so that a pure-noise top
    eigenvalue exceeds it with probability about 1%.
    """
    a, b = np.sqrt(n - 1.0), np.sqrt(float(p))
    mu = (a + b) ** 2
    scale = (a + b) * (1.0 / a + 1.0 / b) ** (1.0 / 3.0)
    return (mu + tw_quantile * scale) / n


def mp_rank(eigenvalues, rows, cols=None, tw_quantile=TW1_Q99):
    """Signal rank and noise std from eigenvalues of M^T M / rows (descending).

    Takes the largest set of trailing eigenvalues consistent with a
    Marchenko-Pastur noise bulk: for r = 0, 1, ... the noise variance is
    the mean of the trailing M - r eigenvalues, and the first r for which
    eigenvalue r lies on or below the bulk's upper edge is the rank.  A
    component sitting exactly on the edge counts as noise.
    """
    lam = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    m = lam.size
    if m < 2:
        raise ValueError("need at least 2 eigenvalues")
    if cols is not None and cols != m:
        raise ValueError("cols does not match the number of eigenvalues")
    if rows < 2:
        raise ValueError("need at least 2 rows")
    for r in range(m):
        var = float(np.mean(lam[r:]))
        # r signal directions leave rows - r degrees of freedom to the noise
        if lam[r] <= var * mp_upper_edge(m - r, rows - r, tw_quantile):
            return r, float(np.sqrt(max(var, 0.0)))
    return m - 1, float(np.sqrt(max(lam[-1], 0.0)))


def _mp_patch(m):
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    rank, sigma = mp_rank((s ** 2 / m.shape[0])[::-1], m.shape[0])
    return (u[:, :rank] * s[:rank]) @ vt[:rank], rank, sigma


def _oracle_rank(m, gold):
    """Rank minimizing ||truncate(m, r) - gold||^2 by exhaustive search."""
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    proj = np.einsum("ir,ij,rj->r", u, gold, vt)
    err = float(np.sum(gold ** 2)) + np.concatenate([[0.0], np.cumsum(s ** 2 - 2 * s * proj)])
    r = int(np.argmin(err))
    assert np.all(err[r] <= err + 1e-9 * max(err.max(), 1.0))
    return (u[:, :r] * s[:r]) @ vt[:r], r, err


def _patchwise(x, cfg, voxel_size, fn, threads, gold=None):
    x = np.asarray(x, dtype=float)
    pshape = cfg.patch_shape(voxel_size, x.shape[1:])
    if int(np.prod(pshape)) < x.shape[0]:
        warnings.warn("patch has fewer voxels than DWIs; PCA is degenerate", RuntimeWarning)
    starts = patch_grid(x.shape[1:], pshape, cfg.strides(pshape))

    def run(st):
        m = extract_casorati(x, st, pshape)
        if gold is None:
            return fn(m)
        return fn(m, extract_casorati(gold, st, pshape))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, starts))
    else:
        results = [run(s) for s in starts]
    acc = np.zeros_like(x)
    cnt = np.zeros(x.shape[1:])
    block = np.zeros((x.shape[0],) + pshape)
    for st, res in zip(starts, results):
        sl = tuple(slice(s, s + p) for s, p in zip(st, pshape))
        insert_casorati(block, res[0], (0, 0, 0), pshape)
        acc[(slice(None),) + sl] += block
        cnt[sl] += 1
    ranks = np.array([res[1] for res in results])
    return acc / cnt, ranks


def mppca_denoise(x, cfg: PatchConfig = PatchConfig(), voxel_size=(1.0, 1.0, 1.0), threads=1,
                  return_ranks=False):
    """Sliding-window PCA with Marchenko-Pastur rank per patch; overlaps averaged."""
    out, ranks = _patchwise(x, cfg, voxel_size, _mp_patch, threads)
    return (out, ranks) if return_ranks else out


def _refine_ranks(x, gold, pshape, starts, ranks, svds, max_sweeps=20):
    """Coordinate descent on patch ranks against the averaged output image.

    Starting from the per-patch optimum, each patch in turn takes the rank
    that minimizes the squared error of the overlap-averaged image, until a
    full sweep changes nothing.
    """
    nd = x.shape[0]
    slices = [(slice(None),) + tuple(slice(s, s + p) for s, p in zip(st, pshape)) for st in starts]
    cnt = np.zeros(x.shape[1:])
    for sl in slices:
        cnt[sl[1:]] += 1

    def contrib(k, r):
        u, s, vt = svds[k]
        return ((u[:, :r] * s[:r]) @ vt[:r]).T.reshape((nd,) + pshape)

    acc = np.zeros_like(x)
    for k, sl in enumerate(slices):
        acc[sl] += contrib(k, ranks[k])
    ranks = ranks.copy()
    for _ in range(max_sweeps):
        changed = False
        for k, sl in enumerate(slices):
            base = acc[sl] - contrib(k, ranks[k])
            g, c = gold[sl], cnt[sl[1:]]
            errs = [float(np.sum(((base + contrib(k, r)) / c - g) ** 2)) for r in range(len(svds[k][1]) + 1)]
            best = int(np.argmin(errs))
            if errs[best] < errs[ranks[k]] * (1 - 1e-12):
                acc[sl] = base + contrib(k, best)
                ranks[k] = best
                changed = True
        if not changed:
            break
    return acc / cnt, ranks


def oracle_pca_denoise(x, gold, cfg: PatchConfig | None = PatchConfig(), voxel_size=(1.0, 1.0, 1.0),
                       global_=False, threads=1, return_ranks=False, refine=True):
    """LPCA (patches) or GPCA (``global_=True``) with MSE-optimal ranks against ``gold``.

    With ``refine`` the per-patch ranks are further adjusted so that the
    overlap-averaged image, not each patch alone, has minimal error.
    """
    if gold is None:
        raise ValueError("oracle PCA needs a gold-standard image")
    x = np.asarray(x, dtype=float)
    gold = np.asarray(gold, dtype=float)
    if gold.shape != x.shape:
        raise ValueError(f"gold shape {gold.shape} != image shape {x.shape}")
    if global_:
        m = x.reshape(x.shape[0], -1).T
        g = gold.reshape(x.shape[0], -1).T
        den, r, _ = _oracle_rank(m, g)
        out = den.T.reshape(x.shape)
        return (out, np.array([r])) if return_ranks else out
    out, ranks = _patchwise(x, cfg, voxel_size, _oracle_rank, threads, gold=gold)
    if refine:
        pshape = cfg.patch_shape(voxel_size, x.shape[1:])
        starts = patch_grid(x.shape[1:], pshape, cfg.strides(pshape))
        svds = [np.linalg.svd(extract_casorati(x, st, pshape), full_matrices=False) for st in starts]
        out, ranks = _refine_ranks(x, gold, pshape, starts, ranks, svds)
    return (out, ranks) if return_ranks else out
