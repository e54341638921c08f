"""Noise and resolution characterization of frozen (linearized) reconstructions.

A reconstruction with frozen phase (and, for SER, frozen IRLS weights) is
a real-linear map L from slab-domain data perturbations to image
perturbations.  Every voxel of L b can be written Re<u, b> for a
data-domain "response functional" u, which gives both the exact noise
variance sigma^2 ||G u||^2 and the spatial response function
Re<u, F delta_x> for point objects delta_x, evaluated through one adjoint.

SRFs are defined in the object domain: the point object may sit at
sub-voxel positions (``upsample`` > 1), with ideal band-limited in-plane
encoding and boxcar sub-slice profiles along the slab axis.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
import warnings

import numpy as np

from .conventional import TikhonovParams, tikhonov_operator
from .core_model import (
    EncodingModel,
    PartialFourierModel,
    apply_partial_fourier,
    apply_rf_adjoint,
)
from .ser import MagnitudeSystem, SerParams, SerResult, ser_reconstruct

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# linearized operators
# ---------------------------------------------------------------------------

class ConventionalLinearization:
    """Phase correction with a fixed phase followed by Tikhonov inversion."""

    def __init__(self, enc: EncodingModel, pf: PartialFourierModel, p, lam=None):
        self.enc, self.pf = enc, pf
        self.p = np.asarray(p, dtype=float)
        self.lam = TikhonovParams(lam).resolve(enc)
        self._t = tikhonov_operator(enc, self.lam)

    @property
    def image_shape(self):
        ns, k, nd, n1, n2 = self.p.shape
        return (nd, n1, n2, ns * k)

    def apply(self, db):
        y = np.real(np.exp(-1j * self.p) * db)
        ns, k, nd, n1, n2 = y.shape
        out = np.einsum("jk,skqxy->qxysj", self._t, y, optimize=True)
        return np.real(out).reshape(nd, n1, n2, ns * k)

    def restrict(self, q, copies=1):
        p = np.repeat(self.p[:, :, q:q + 1], copies, axis=2)
        return ConventionalLinearization(self.enc, self.pf, p, self.lam)

    def functionals(self, q, voxels):
        """Response functionals for voxels (x, y, z) of DWI q, stacked on the DWI axis."""
        ns, k, nd, n1, n2 = self.p.shape
        u = np.zeros((ns, k, len(voxels), n1, n2), dtype=complex)
        tr = np.real(self._t)
        for i, (x, y, z) in enumerate(voxels):
            s, j = divmod(z, k)
            u[s, :, i, x, y] = tr[j, :] * np.exp(1j * self.p[s, :, q, x, y])
        return u


class SerLinearization:
    """SER magnitude step with frozen phase and IRLS weights.

    Median normalization scales data and image of each DWI by the same
    factor, so it cancels in the map from data to image.
    """

    def __init__(self, enc: EncodingModel, pf: PartialFourierModel, p, lambda2, weights,
                 cg_tol=1e-10, cg_iters=500):
        self.enc, self.pf = enc, pf
        self.p = np.asarray(p, dtype=float)
        self.lambda2 = float(lambda2)
        self.weights = weights
        self.cg_tol, self.cg_iters = cg_tol, cg_iters
        self.system = MagnitudeSystem(self.p, enc, pf, self.lambda2, weights)

    @classmethod
    def from_result(cls, result: SerResult, enc, pf, **kw):
        st = result.state
        return cls(enc, pf, st.p, st.lambda2, st.irls_weights, **kw)

    @property
    def image_shape(self):
        return self.system.image_shape

    def apply(self, db):
        x, info = self.system.solve(self.system.rhs(db), tol=self.cg_tol, maxiter=self.cg_iters)
        if not info.converged:
            warnings.warn(f"linearized SER solve not converged (residual {info.residual:.2e})",
                          RuntimeWarning)
        return x

    def restrict(self, q, copies=1):
        p = np.repeat(self.p[:, :, q:q + 1], copies, axis=2)
        return SerLinearization(self.enc, self.pf, p, self.lambda2, self.weights,
                                self.cg_tol, self.cg_iters)

    def functionals(self, q, voxels):
        sub = self.restrict(q, len(voxels))
        e = np.zeros(sub.image_shape)
        for i, (x, y, z) in enumerate(voxels):
            e[i, x, y, z] = 1.0
        v, info = sub.system.solve(e, tol=self.cg_tol, maxiter=self.cg_iters)
        if not info.converged:
            warnings.warn(f"SER response solve not converged (residual {info.residual:.2e})",
                          RuntimeWarning)
        return sub.system.forward(v)


def linearized_recon_operator(kind, enc, pf, *, p=None, lam=None, result: SerResult | None = None,
                              **kw):
    """Build the frozen linear reconstruction operator ("conventional" or "ser")."""
    if kind == "conventional":
        if p is None:
            raise ValueError("conventional linearization needs the phase p")
        return ConventionalLinearization(enc, pf, p, lam)
    if kind == "ser":
        if result is None:
            raise ValueError("SER linearization needs a SerResult")
        return SerLinearization.from_result(result, enc, pf, **kw)
    raise ValueError(f"unknown operator kind {kind!r}")


def exact_variance(opr, q, voxels, sigma=1.0):
    """sigma^2 ||G u||^2 for each voxel; noise confined to measured k-space."""
    u = opr.functionals(q, list(voxels))
    gu = apply_partial_fourier(u, opr.pf)
    return sigma ** 2 * np.sum(np.abs(gu) ** 2, axis=(0, 1, 3, 4))


# ---------------------------------------------------------------------------
# spatial response functions
# ---------------------------------------------------------------------------

@dataclass
class SrfVolume:
    data: np.ndarray                 # (nx * U, ny * U, nz * U)
    target: tuple[int, int, int]
    dwi: int
    upsample: int
    origin: tuple[int, int, int]     # first voxel of the window
    voxel_size: tuple[float, float, float]

    @property
    def fine_voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size)) / self.upsample ** 3

    @property
    def peak(self):
        return np.unravel_index(int(np.argmax(self.data)), self.data.shape)

    def target_index(self):
        """Fine-grid index of the target voxel center."""
        u = self.upsample
        return tuple((t - o) * u + (u - 1) // 2 for t, o in zip(self.target, self.origin))

    def profiles(self):
        """1-D profiles through the peak along the three axes."""
        i, j, k = self.peak
        return self.data[:, j, k], self.data[i, :, k], self.data[i, j, :]


def dirichlet_kernel(n, offsets, mask=None):
    """(1/n) sum_k mask_k exp(i 2 pi k d / n) over centered k, for each offset d."""
    k = np.arange(n) - n // 2
    m = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
    return (np.exp(2j * np.pi * np.outer(offsets, k[m > 0]) / n)).sum(axis=1) / n


def compute_srf(opr, target, dwi, upsample=1, radius=4, voxel_size=(1.0, 1.0, 1.0)) -> SrfVolume:
    """Response of voxel ``target`` of DWI ``dwi`` to a unit point object."""
    nd, n1, n2, n3 = opr.image_shape
    x, y, z = (int(v) for v in target)
    if not (0 <= x < n1 and 0 <= y < n2 and 0 <= z < n3 and 0 <= dwi < nd):
        raise IndexError(f"target {target} / dwi {dwi} outside volume {opr.image_shape}")
    u = upsample
    lo = [max(c - radius, 0) for c in (x, y, z)]
    hi = [min(c + radius + 1, n) for c, n in zip((x, y, z), (n1, n2, n3))]

    func = opr.functionals(dwi, [(x, y, z)])
    # W = A^H (e^{-ip} G u): complex image of DWI dwi
    ph = opr.p[:, :, dwi:dwi + 1]
    w = apply_rf_adjoint(np.exp(-1j * ph) * apply_partial_fourier(func, opr.pf), opr.enc)[0]

    frac = (np.arange(u) - (u - 1) / 2) / u

    def positions(a, b):
        return (np.arange(a, b)[:, None] + frac[None, :]).ravel()

    px, py = positions(lo[0], hi[0]), positions(lo[1], hi[1])
    kx = _dirichlet_matrix(n1, px) if u > 1 else None
    ky = _dirichlet_matrix(n2, py) if u > 1 else None
    planes = []
    for zz in range(lo[2], hi[2]):
        wz = np.conj(w[:, :, zz])
        if u == 1:
            plane = np.real(wz[lo[0]:hi[0], lo[1]:hi[1]])
        else:
            plane = np.real(kx.T @ wz @ ky)
        planes.extend([plane] * u)
    data = np.stack(planes, axis=-1)
    return SrfVolume(data, (x, y, z), dwi, u, tuple(lo), tuple(voxel_size))


def _dirichlet_matrix(n, pos):
    return dirichlet_kernel(n, (np.arange(n)[:, None] - pos[None, :]).ravel()).reshape(n, len(pos))


def fvhm(srf, voxel_volume=None):
    """Full volume at half maximum: voxels strictly above max / 2, times their volume."""
    data = srf.data if isinstance(srf, SrfVolume) else np.asarray(srf)
    if voxel_volume is None:
        if not isinstance(srf, SrfVolume):
            raise ValueError("voxel_volume is required for plain arrays")
        voxel_volume = srf.fine_voxel_volume
    peak = float(np.max(data))
    if peak <= 0:
        raise ValueError("SRF has no positive maximum")
    return int(np.count_nonzero(data > 0.5 * peak)) * float(voxel_volume)


def rf_asymmetry(srf: SrfVolume) -> float:
    """Relative odd part of the slab-axis profile through the target voxel."""
    i, j, k = srf.target_index()
    prof = srf.data[i, j, :]
    r = min(k, len(prof) - 1 - k)
    seg = prof[k - r:k + r + 1]
    return float(np.linalg.norm(seg - seg[::-1]) / (2 * np.linalg.norm(seg)))


def slab_mass_split(srf: SrfVolume, k_enc: int):
    """Absolute SRF mass inside the target's slab vs the adjacent sub-slices of neighboring slabs."""
    u = srf.upsample
    z_abs = srf.origin[2] + np.arange(srf.data.shape[2]) // u
    mass = np.abs(srf.data).sum(axis=(0, 1))
    slab = srf.target[2] // k_enc
    same = z_abs // k_enc == slab
    first, last = slab * k_enc, slab * k_enc + k_enc - 1
    adjacent = (z_abs == first - 1) | (z_abs == last + 1)
    within = mass[same & (z_abs != srf.target[2])]
    return float(within.sum()), float(mass[adjacent].sum())


# ---------------------------------------------------------------------------
# noise variance maps
# ---------------------------------------------------------------------------

@dataclass
class VarianceMap:
    data: np.ndarray       # (n1, n2, n3)
    dwi: int
    n_trials: int = 0      # 0 for analytic maps


def _trial_noise(shape, sigma, seed, dwi, trial):
    rng = np.random.default_rng([seed, 7, dwi, trial])
    z = rng.standard_normal((2,) + shape)
    return sigma * (z[0] + 1j * z[1])


def noise_variance_map(opr, sigma, n_trials=512, seed=0, dwi=0, batch=64, threads=1) -> VarianceMap:
    """Monte Carlo per-voxel variance of the linear reconstruction of pure noise.

    Noise is i.i.d. complex Gaussian on the measured k-space lines.  Each
    trial draws from its own seeded stream and batches are reduced in a
    fixed order, so the result does not depend on ``threads``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n_trials < 2:
        raise ValueError("need at least 2 trials")
    ns, k, nd, n1, n2 = opr.p.shape
    one = (ns, k, n1, n2)
    starts = list(range(0, n_trials, batch))

    def run(start):
        m = min(batch, n_trials - start)
        sub = opr.restrict(dwi, m)
        db = np.stack([_trial_noise(one, sigma, seed, dwi, start + i) for i in range(m)], axis=2)
        f = sub.apply(apply_partial_fourier(db, opr.pf))
        return f.sum(axis=0), (f ** 2).sum(axis=0)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    s1 = np.zeros(opr.image_shape[1:])
    s2 = np.zeros(opr.image_shape[1:])
    for a, b in parts:
        s1 += a
        s2 += b
    mean = s1 / n_trials
    var = (s2 - n_trials * mean ** 2) / (n_trials - 1)
    return VarianceMap(np.maximum(var, 0.0), dwi, n_trials)


def analytic_variance_map(opr, sigma, dwi=0, batch=256) -> VarianceMap:
    """Exact per-voxel variance for every voxel (small grids only)."""
    nd, n1, n2, n3 = opr.image_shape
    vox = [tuple(int(v) for v in np.unravel_index(i, (n1, n2, n3))) for i in range(n1 * n2 * n3)]
    out = np.concatenate([exact_variance(opr, dwi, vox[i:i + batch], sigma) for i in range(0, len(vox), batch)])
    return VarianceMap(out.reshape(n1, n2, n3), dwi)


def variance_reduction_map(conv: VarianceMap, ser: VarianceMap):
    """conv / ser; voxels with zero SER variance come back as NaN and flagged."""
    c = conv.data if isinstance(conv, VarianceMap) else np.asarray(conv)
    s = ser.data if isinstance(ser, VarianceMap) else np.asarray(ser)
    if c.shape != s.shape:
        raise ValueError("variance maps differ in shape")
    flagged = s <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(flagged, np.nan, c / np.where(flagged, 1.0, s))
    return ratio, flagged


# ---------------------------------------------------------------------------
# lambda2 calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    lambda2: float
    ratio: float                 # median smooth-voxel variance reduction
    result: SerResult
    voxel_ratios: np.ndarray
    voxels: list
    trace: list                  # (lambda2, ratio) pairs tried


def smooth_and_edge_voxels(labels, margin=2):
    """Voxels at least ``margin`` away from any label change, and voxels on a label boundary."""
    from scipy import ndimage

    labels = np.asarray(labels)
    boundary = np.zeros(labels.shape, dtype=bool)
    for ax in range(3):
        d = np.diff(labels, axis=ax) != 0
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        boundary[tuple(lo)] |= d
        boundary[tuple(hi)] |= d
    inside = labels > 0
    near = ndimage.binary_dilation(boundary, iterations=margin)
    pad = np.zeros(labels.shape, dtype=bool)
    pad[margin:-margin, margin:-margin, margin:-margin] = True
    smooth = inside & ~near & pad
    edge = boundary & inside
    return smooth, edge


def sample_voxels(mask, n, seed=0):
    idx = np.argwhere(mask)
    rng = np.random.default_rng([seed, 11])
    pick = rng.choice(len(idx), size=min(n, len(idx)), replace=False)
    return [tuple(int(v) for v in idx[i]) for i in sorted(pick)]


def variance_ratios(conv_op, ser_op, dwi, voxels):
    vc = exact_variance(conv_op, dwi, voxels)
    vs = exact_variance(ser_op, dwi, voxels)
    return vc / vs


def calibrate_lambda2(b, enc, pf, base: SerParams, target, voxels, dwi, conv_op,
                      lo=1e-3, hi=1e2, rel_tol=0.04, max_evals=12) -> CalibrationResult:
    """Bisect log(lambda2) until the median smooth-voxel variance reduction hits ``target``."""
    from dataclasses import replace

    trace = []
    cache = {}

    def evaluate(lam):
        if lam in cache:
            return cache[lam]
        res = ser_reconstruct(b, enc, pf, replace(base, lambda2=lam))
        sop = SerLinearization.from_result(res, enc, pf)
        r = variance_ratios(conv_op, sop, dwi, voxels)
        med = float(np.median(r))
        trace.append((lam, med))
        log.info("lambda2=%.4g median variance reduction %.3f", lam, med)
        cache[lam] = (med, res, r)
        return cache[lam]

    a, bb = np.log(lo), np.log(hi)
    best = None
    for _ in range(max_evals):
        mid = float(np.exp(0.5 * (a + bb)))
        med, res, r = evaluate(mid)
        if best is None or abs(med - target) < abs(best[1] - target):
            best = (mid, med, res, r)
        if abs(med - target) <= rel_tol * target:
            break
        if med < target:
            a = np.log(mid)
        else:
            bb = np.log(mid)
    lam, med, res, r = best
    return CalibrationResult(lam, med, res, r, list(voxels), trace)
