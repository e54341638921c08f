"""Conventional gSlider reconstruction: low-resolution phase estimate,
phase correction and per-slab Tikhonov inversion."""
from __future__ import annotations

from dataclasses import dataclass
import warnings

import numpy as np

from .core_model import EncodingModel, PartialFourierModel, cfft, cifft


@dataclass(frozen=True)
class TikhonovParams:
    lam: float | None = None   # None -> relative default, see default_lambda

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("Tikhonov lambda must be nonnegative")

    def resolve(self, enc: EncodingModel) -> float:
        return default_lambda(enc) if self.lam is None else float(self.lam)


def default_lambda(enc: EncodingModel, rel: float = 0.02) -> float:
    return rel * float(np.real(np.trace(enc.gram))) / enc.k_enc


def _hamming_window(n: int, halfwidth: float) -> np.ndarray:
    """Hamming taper over centered k-space, zero beyond ``halfwidth`` lines from DC."""
    k = np.arange(n) - n // 2
    w = 0.54 + 0.46 * np.cos(np.pi * k / halfwidth)
    w[np.abs(k) >= halfwidth] = 0.0
    return w


def lowres_window(n1: int, n2: int, smoothing_scale: float) -> np.ndarray:
    """Separable 2-D Hamming window; ``smoothing_scale`` is in voxels."""
    return np.outer(_hamming_window(n1, n1 / smoothing_scale), _hamming_window(n2, n2 / smoothing_scale))


def default_smoothing_scale(pf: PartialFourierModel) -> float:
    """Window matched to the symmetrically sampled band of partial Fourier data."""
    hw = pf.symmetric_halfwidth if not pf.is_full else pf.n_pe // 4
    return pf.n_pe / max(hw, 1)


def estimate_phase_lowres(b, smoothing_scale: float = 4.0):
    """Phase of a heavily k-space-windowed copy of every slab image.

    Voxels where the low-resolution image is exactly zero get phase 0; a
    warning is issued if a whole image is zero.
    """
    b = np.asarray(b)
    n1, n2 = b.shape[-2:]
    win = lowres_window(n1, n2, smoothing_scale)
    k = cfft(cfft(b, axis=-2), axis=-1)
    low = cifft(cifft(k * win, axis=-2), axis=-1)
    zero_images = ~np.any(low != 0, axis=(-2, -1))
    if np.any(zero_images):
        warnings.warn(f"{int(zero_images.sum())} all-zero slab image(s); phase set to 0", RuntimeWarning)
    return np.angle(low)


def phase_correct(b, p):
    """real(exp(-i p) * b)."""
    b, p = np.asarray(b), np.asarray(p)
    if b.shape != p.shape:
        raise ValueError(f"data shape {b.shape} and phase shape {p.shape} differ")
    return np.real(np.exp(-1j * p) * b)


def tikhonov_operator(enc: EncodingModel, lam: float) -> np.ndarray:
    """(A^H A + lam I)^-1 A^H as a k x k matrix."""
    gram = enc.gram
    reg = gram + lam * np.eye(enc.k_enc)
    cond = np.linalg.cond(reg)
    if not np.isfinite(cond) or cond > 1e14:
        raise np.linalg.LinAlgError(
            f"regularized normal matrix is singular (cond={cond:.3g}, lambda={lam})")
    return np.linalg.solve(reg, enc.profile_matrix.conj().T)


def tikhonov_recon(b_corrected, enc: EncodingModel, params: TikhonovParams = TikhonovParams()):
    """Per-slab direct solve of the regularized normal equations.

    Input (ns, k, nd, n1, n2) real, output (nd, n1, n2, ns * k) real.
    """
    b_corrected = np.asarray(b_corrected)
    if b_corrected.ndim != 5 or b_corrected.shape[1] != enc.k_enc:
        raise ValueError(f"expected (ns, {enc.k_enc}, nd, n1, n2) data, got {b_corrected.shape}")
    t = tikhonov_operator(enc, params.resolve(enc))
    ns, k, nd, n1, n2 = b_corrected.shape
    out = np.einsum("jk,skqxy->qxysj", t, b_corrected, optimize=True)
    return np.real(out).reshape(nd, n1, n2, ns * k)


def conventional_recon(b, enc: EncodingModel, pf: PartialFourierModel,
                       params: TikhonovParams = TikhonovParams(), smoothing_scale=None):
    """Phase estimation, phase correction and Tikhonov inversion in one call.

    Returns the image and the phase estimate.
    """
    if smoothing_scale is None:
        smoothing_scale = default_smoothing_scale(pf)
    p = estimate_phase_lowres(b, smoothing_scale)
    return tikhonov_recon(phase_correct(b, p), enc, params), p


def average_repetitions(recons):
    recons = [np.asarray(r) for r in recons]
    if not recons:
        raise ValueError("need at least one repetition")
    shape = recons[0].shape
    for r in recons[1:]:
        if r.shape != shape:
            raise ValueError(f"repetition shapes differ: {shape} vs {r.shape}")
    out = np.zeros(shape, dtype=np.result_type(*recons))
    for r in recons:
        out += r
    return out / len(recons)
