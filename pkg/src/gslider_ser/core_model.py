"""Problem geometry and the linear operators of the gSlider forward model.

Array layouts used throughout the package
-----------------------------------------
image  (f)  : real,    shape (nd, n1, n2, n3), sub-slice z = s * k_enc + j
slab   (b)  : complex, shape (ns, k_enc, nd, n1, n2)
phase  (p)  : real,    same shape as slab

The partial-Fourier operator acts along the last (phase-encode) axis of
in-plane images using a unitary, centered FFT (DC at index n // 2).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import math

import numpy as np


@dataclass(frozen=True)
class GridDims:
    n1: int
    n2: int
    ns: int
    nd: int
    k_enc: int = 5
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("n1", "n2", "ns", "nd", "k_enc"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"GridDims.{name} must be positive")
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError("voxel_size must be three positive numbers")
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def n3(self) -> int:
        return self.k_enc * self.ns

    @property
    def image_shape(self) -> tuple[int, int, int, int]:
        return (self.nd, self.n1, self.n2, self.n3)

    @property
    def slab_shape(self) -> tuple[int, int, int, int, int]:
        return (self.ns, self.k_enc, self.nd, self.n1, self.n2)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    def with_nd(self, nd: int) -> "GridDims":
        return GridDims(self.n1, self.n2, self.ns, nd, self.k_enc, self.voxel_size)

    @classmethod
    def from_image_shape(cls, shape, k_enc=5, voxel_size=(1.0, 1.0, 1.0)) -> "GridDims":
        nd, n1, n2, n3 = shape
        if n3 % k_enc:
            raise ValueError(f"n3={n3} is not a multiple of k_enc={k_enc}")
        return cls(n1, n2, n3 // k_enc, nd, k_enc, voxel_size)

    @classmethod
    def from_slab_shape(cls, shape, voxel_size=(1.0, 1.0, 1.0)) -> "GridDims":
        ns, k_enc, nd, n1, n2 = shape
        return cls(n1, n2, ns, nd, k_enc, voxel_size)


def default_profile_matrix(k_enc: int = 5) -> np.ndarray:
    """All-ones matrix minus twice the identity: encoding k flips the sign of sub-slice k."""
    return np.ones((k_enc, k_enc)) - 2.0 * np.eye(k_enc)


@dataclass(frozen=True, eq=False)
class EncodingModel:
    """RF slab-encoding matrix, applied identically to every slab and DWI.

    Row k of ``profile_matrix`` holds the weights of the sub-slices in
    the k-th encoded slab image.
    """

    profile_matrix: np.ndarray = field(default_factory=default_profile_matrix)

    def __post_init__(self):
        a = np.array(self.profile_matrix)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("profile matrix must be square")
        if not np.all(np.isfinite(a)):
            raise ValueError("profile matrix must be finite")
        if not np.iscomplexobj(a):
            a = a.astype(float)
        a.setflags(write=False)
        object.__setattr__(self, "profile_matrix", a)
        if not np.isfinite(self.condition_number):
            raise ValueError("profile matrix is singular")

    @property
    def k_enc(self) -> int:
        return self.profile_matrix.shape[0]

    @cached_property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.profile_matrix))

    @cached_property
    def gram(self) -> np.ndarray:
        a = self.profile_matrix
        return a.conj().T @ a

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.profile_matrix)


@dataclass(frozen=True, eq=False)
class PartialFourierModel:
    """Zero-filled partial Fourier sampling along the phase-encode axis."""

    n_pe: int
    pf_fraction: float = 0.75

    def __post_init__(self):
        if not 0.5 < self.pf_fraction <= 1.0:
            raise ValueError("pf_fraction must lie in (0.5, 1]")
        if self.n_pe < 1:
            raise ValueError("n_pe must be positive")

    @cached_property
    def n_lines(self) -> int:
        # guard against float round-up, e.g. 0.75 * 32 == 24.000000000000004
        return min(self.n_pe, math.ceil(round(self.pf_fraction * self.n_pe, 9)))

    @cached_property
    def line_mask(self) -> np.ndarray:
        """Boolean mask over centered k-space lines (DC at n_pe // 2)."""
        m = np.zeros(self.n_pe, dtype=bool)
        m[self.n_pe - self.n_lines:] = True
        if not m[self.n_pe // 2]:
            raise ValueError("partial Fourier mask must contain the k-space center")
        m.setflags(write=False)
        return m

    def mask(self, n1: int) -> np.ndarray:
        return np.broadcast_to(self.line_mask, (n1, self.n_pe))

    @property
    def is_full(self) -> bool:
        return self.n_lines == self.n_pe

    @cached_property
    def symmetric_halfwidth(self) -> int:
        """Number of lines on each side of DC that are sampled on both sides."""
        c = self.n_pe // 2
        lo = self.n_pe - self.n_lines
        return min(c - lo, self.n_pe - 1 - c)


def cfft(x, axis=-1):
    return np.fft.fftshift(np.fft.fft(np.fft.ifftshift(x, axes=axis), axis=axis, norm="ortho"), axes=axis)


def cifft(x, axis=-1):
    return np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(x, axes=axis), axis=axis, norm="ortho"), axes=axis)


def apply_rf_encoding(f, enc: EncodingModel):
    """Slab-encode an image stack: (nd, n1, n2, n3) -> (ns, k, nd, n1, n2)."""
    f = np.asarray(f)
    if f.ndim != 4:
        raise ValueError(f"image must be 4-D (nd, n1, n2, n3), got shape {f.shape}")
    k = enc.k_enc
    nd, n1, n2, n3 = f.shape
    if n3 % k:
        raise ValueError(f"n3={n3} is not a multiple of k_enc={k}")
    f5 = f.reshape(nd, n1, n2, n3 // k, k)
    return np.einsum("kj,qxysj->skqxy", enc.profile_matrix, f5, optimize=True)


def apply_rf_adjoint(g, enc: EncodingModel):
    """Conjugate transpose of :func:`apply_rf_encoding`."""
    g = np.asarray(g)
    if g.ndim != 5 or g.shape[1] != enc.k_enc:
        raise ValueError(f"slab data must be (ns, {enc.k_enc}, nd, n1, n2), got shape {g.shape}")
    ns, k, nd, n1, n2 = g.shape
    out = np.einsum("kj,skqxy->qxysj", enc.profile_matrix.conj(), g, optimize=True)
    return out.reshape(nd, n1, n2, ns * k)


def apply_partial_fourier(img, pf: PartialFourierModel):
    """G = IFFT . mask . FFT along the last axis; works on any leading shape."""
    img = np.asarray(img)
    if img.shape[-1] != pf.n_pe:
        raise ValueError(f"phase-encode axis has length {img.shape[-1]}, model expects {pf.n_pe}")
    if pf.is_full:
        return img.astype(complex, copy=True)
    k = cfft(img, axis=-1)
    k[..., ~pf.line_mask] = 0
    return cifft(k, axis=-1)


def forward_model(f, p, enc: EncodingModel, pf: PartialFourierModel):
    """G(exp(i p) * A f)."""
    p = np.asarray(p)
    if not np.all(np.isfinite(p)):
        raise ValueError("phase contains non-finite values")
    af = apply_rf_encoding(f, enc)
    if af.shape != p.shape:
        raise ValueError(f"phase shape {p.shape} does not match slab shape {af.shape}")
    return apply_partial_fourier(np.exp(1j * p) * af, pf)


def forward_adjoint(g, p, enc: EncodingModel, pf: PartialFourierModel):
    """A^H (exp(-i p) * G g); complex image-shaped output."""
    return apply_rf_adjoint(np.exp(-1j * np.asarray(p)) * apply_partial_fourier(g, pf), enc)


# ---------------------------------------------------------------------------
# neighbor systems and finite differences
# ---------------------------------------------------------------------------
#
# The penalties sum over voxels n and over neighbors m of n, so every
# unordered pair enters twice.  D is therefore sqrt(2) times the incidence
# operator over unordered pairs, and D^H D = 2 L with L the graph Laplacian.

_SQRT2 = math.sqrt(2.0)


def forward_differences(x, axes):
    """Differences x[i+1] - x[i] along each axis (one array per axis)."""
    out = []
    for ax in axes:
        out.append(np.diff(x, axis=ax))
    return out


def forward_differences_adjoint(diffs, axes, shape):
    out = np.zeros(shape, dtype=np.result_type(*[d.dtype for d in diffs]))
    for d, ax in zip(diffs, axes):
        ax = ax % len(shape)
        lo = [slice(None)] * len(shape)
        hi = [slice(None)] * len(shape)
        lo[ax] = slice(0, shape[ax] - 1)
        hi[ax] = slice(1, shape[ax])
        out[tuple(hi)] += d
        out[tuple(lo)] -= d
    return out


INPLANE_AXES = (-2, -1)
VOLUME_AXES = (-3, -2, -1)


def apply_D(x, axes=INPLANE_AXES):
    """Ordered-pair finite-difference operator (sqrt(2) * incidence)."""
    return [_SQRT2 * d for d in forward_differences(x, axes)]


def apply_D_adjoint(diffs, axes, shape):
    return _SQRT2 * forward_differences_adjoint(diffs, axes, shape)


def laplacian(x, axes, weights=None):
    """Graph Laplacian over nearest neighbors with truncated boundaries.

    ``weights`` is an optional list (one per axis) of nonnegative edge
    weights shaped like the corresponding forward differences.
    """
    diffs = forward_differences(x, axes)
    if weights is not None:
        diffs = [w * d for w, d in zip(weights, diffs)]
    return forward_differences_adjoint(diffs, axes, x.shape)


def weighted_degree(shape, axes, weights=None):
    """Sum of edge weights touching each voxel (the Laplacian diagonal)."""
    deg = np.zeros(shape)
    for i, ax in enumerate(axes):
        ax = ax % len(shape)
        w = np.ones(_diff_shape(shape, ax)) if weights is None else weights[i]
        lo = [slice(None)] * len(shape)
        hi = [slice(None)] * len(shape)
        lo[ax] = slice(0, shape[ax] - 1)
        hi[ax] = slice(1, shape[ax])
        deg[tuple(lo)] += w
        deg[tuple(hi)] += w
    return deg


def _diff_shape(shape, ax):
    s = list(shape)
    s[ax] -= 1
    return tuple(s)


def phase_penalty(p):
    """R(p) = ||D exp(i p)||^2 with in-plane 4-neighbors, per slab image."""
    z = np.exp(1j * np.asarray(p))
    return 2.0 * sum(float(np.sum(np.abs(d) ** 2)) for d in forward_differences(z, INPLANE_AXES))


def phase_penalty_normal(p):
    """D^H D exp(i p)."""
    z = np.exp(1j * np.asarray(p))
    return 2.0 * laplacian(z, INPLANE_AXES)


@dataclass(frozen=True)
class NeighborSystem:
    """Explicit neighbor lists for a volume of shape (n1, n2, n3).

    Intended for small grids (tests, dense oracles); the solvers use the
    vectorized difference operators above.
    """

    shape: tuple[int, int, int]

    @cached_property
    def inplane_4(self) -> list[list[int]]:
        return self._lists(axes=(0, 1))

    @cached_property
    def volumetric_6(self) -> list[list[int]]:
        return self._lists(axes=(0, 1, 2))

    def _lists(self, axes):
        shape = self.shape
        out = []
        for flat in range(int(np.prod(shape))):
            idx = np.unravel_index(flat, shape)
            nbrs = []
            for ax in axes:
                for step in (-1, 1):
                    j = list(idx)
                    j[ax] += step
                    if 0 <= j[ax] < shape[ax]:
                        nbrs.append(int(np.ravel_multi_index(j, shape)))
            out.append(nbrs)
        return out

    def incidence(self, which="inplane_4") -> np.ndarray:
        """Dense ordered-pair difference matrix: one row per (n, m), m in nbrs(n)."""
        lists = getattr(self, which)
        n = len(lists)
        rows = []
        for i, nbrs in enumerate(lists):
            for j in nbrs:
                r = np.zeros(n)
                r[i] = 1.0
                r[j] = -1.0
                rows.append(r)
        return np.array(rows).reshape(-1, n)


# ---------------------------------------------------------------------------
# typed containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SlabStack:
    """RF-encoded thick-slab images b, shape (ns, k_enc, nd, n1, n2)."""

    data: np.ndarray
    dims: GridDims

    def __post_init__(self):
        if self.data.shape != self.dims.slab_shape:
            raise ValueError(f"slab data shape {self.data.shape} != {self.dims.slab_shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("slab data contains non-finite values")


@dataclass(frozen=True, eq=False)
class ImageStack:
    """Real sub-slice amplitudes f, shape (nd, n1, n2, n3)."""

    data: np.ndarray
    dims: GridDims

    def __post_init__(self):
        if np.iscomplexobj(self.data):
            raise TypeError("ImageStack data must be real")
        if self.data.shape != self.dims.image_shape:
            raise ValueError(f"image data shape {self.data.shape} != {self.dims.image_shape}")


@dataclass(frozen=True, eq=False)
class PhaseField:
    """Phase p in radians, laid out like :class:`SlabStack`."""

    data: np.ndarray
    dims: GridDims

    def __post_init__(self):
        if np.iscomplexobj(self.data):
            raise TypeError("phase must be real")
        if self.data.shape != self.dims.slab_shape:
            raise ValueError(f"phase shape {self.data.shape} != {self.dims.slab_shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("phase contains non-finite values")
