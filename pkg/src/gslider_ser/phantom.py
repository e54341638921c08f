"""Synthetic multi-DWI phantoms and simulated gSlider acquisitions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_model import (
    EncodingModel,
    GridDims,
    PartialFourierModel,
    apply_partial_fourier,
    apply_rf_encoding,
)


@dataclass(frozen=True)
class Region:
    """One tissue compartment.

    ``shape`` is ``"ellipsoid"`` (center/radii), ``"cylinder"`` (elliptic
    cross-section from center/radii, z extent from lo/hi) or ``"box"``
    (lo/hi corners), all in voxel coordinates (x, y, z) of the sub-slice
    grid.  Later regions overwrite earlier ones.
    """

    name: str
    shape: str
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radii: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tensor: tuple[tuple[float, ...], ...] = ((1e-3, 0, 0), (0, 1e-3, 0), (0, 0, 1e-3))
    s0: float = 1.0

    def contains(self, xx, yy, zz):
        if self.shape == "ellipsoid":
            c, r = self.center, self.radii
            return ((xx - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((zz - c[2]) / r[2]) ** 2 <= 1.0
        if self.shape == "cylinder":
            # elliptic cylinder along z, z extent from lo/hi
            c, r = self.center, self.radii
            inside = ((xx - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 <= 1.0
            return inside & (zz >= self.lo[2]) & (zz <= self.hi[2])
        if self.shape == "box":
            return ((xx >= self.lo[0]) & (xx <= self.hi[0]) & (yy >= self.lo[1]) & (yy <= self.hi[1])
                    & (zz >= self.lo[2]) & (zz <= self.hi[2]))
        raise ValueError(f"unknown region shape {self.shape!r}")


@dataclass(frozen=True)
class PhaseSpec:
    scale: float = 8.0        # correlation length in voxels
    amplitude: float = 1.0    # std of the phase field in radians


@dataclass(frozen=True)
class PhantomSpec:
    dims: GridDims
    regions: tuple[Region, ...]
    b_value: float = 1500.0
    bvecs: np.ndarray = field(default=None)
    noise_sigma: float = 0.05
    phase: PhaseSpec = PhaseSpec()
    noise_profile: str = "uniform"   # or "radial": lower SNR toward the center
    seed: int = 0

    def __post_init__(self):
        bvecs = np.asarray(self.bvecs, dtype=float)
        if bvecs.shape != (self.dims.nd, 3):
            raise ValueError(f"bvecs must have shape ({self.dims.nd}, 3)")
        norms = np.linalg.norm(bvecs, axis=1)
        weighted = norms > 0
        if not np.allclose(norms[weighted], 1.0, atol=1e-9):
            raise ValueError("weighted gradient directions must be unit norm")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        for r in self.regions:
            t = np.asarray(r.tensor, dtype=float)
            if not np.allclose(t, t.T):
                raise ValueError(f"tensor of region {r.name!r} is not symmetric")
            if np.linalg.eigvalsh(t).min() < -1e-15:
                raise ValueError(f"tensor of region {r.name!r} is not positive semidefinite")
        object.__setattr__(self, "bvecs", bvecs)

    @property
    def bvals(self) -> np.ndarray:
        return np.where(np.linalg.norm(self.bvecs, axis=1) > 0, self.b_value, 0.0)


@dataclass
class SimulatedDataset:
    truth: np.ndarray          # (nd, n1, n2, n3)
    truth_phase: np.ndarray    # (ns, k, nd, n1, n2)
    repetitions: list          # of (ns, k, nd, n1, n2) complex arrays
    labels: np.ndarray         # (n1, n2, n3) int, 0 = background
    spec: PhantomSpec


def fibonacci_directions(n: int) -> np.ndarray:
    """Roughly uniform unit vectors on the upper hemisphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    r = np.sqrt(1 - z ** 2)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def default_scheme(n_b0: int = 1, n_dirs: int = 12) -> np.ndarray:
    return np.concatenate([np.zeros((n_b0, 3)), fibonacci_directions(n_dirs)])


def _diag(*d):
    return tuple(tuple(d[i] if i == j else 0.0 for j in range(3)) for i in range(3))


def default_regions(n1: int, n2: int, n3: int) -> tuple[Region, ...]:
    """Elliptic-cylinder brain with a WM core, crossing tracts and a ventricle."""
    cx, cy, cz = (n1 - 1) / 2, (n2 - 1) / 2, (n3 - 1) / 2
    zlo, zhi = 0.0, n3 - 1.0
    return (
        Region("gm", "cylinder", center=(cx, cy, cz), radii=(0.47 * n1, 0.47 * n2, 1.0),
               lo=(0, 0, zlo), hi=(0, 0, zhi), tensor=_diag(0.9e-3, 0.9e-3, 0.9e-3), s0=1.0),
        Region("wm", "cylinder", center=(cx, cy, cz), radii=(0.36 * n1, 0.36 * n2, 1.0),
               lo=(0, 0, zlo), hi=(0, 0, zhi), tensor=_diag(0.9e-3, 0.6e-3, 0.6e-3), s0=0.8),
        Region("tract_x", "box", lo=(cx - 0.28 * n1, cy - 0.22 * n2, 0.15 * n3),
               hi=(cx + 0.28 * n1, cy - 0.08 * n2, 0.85 * n3),
               tensor=_diag(1.7e-3, 0.3e-3, 0.3e-3), s0=0.75),
        Region("tract_y", "box", lo=(cx + 0.06 * n1, cy - 0.05 * n2, 0.15 * n3),
               hi=(cx + 0.20 * n1, cy + 0.28 * n2, 0.85 * n3),
               tensor=_diag(0.3e-3, 1.7e-3, 0.3e-3), s0=0.75),
        Region("tract_z", "box", lo=(cx - 0.24 * n1, cy + 0.06 * n2, zlo),
               hi=(cx - 0.10 * n1, cy + 0.20 * n2, zhi),
               tensor=_diag(0.3e-3, 0.3e-3, 1.7e-3), s0=0.75),
        Region("ventricle", "ellipsoid", center=(cx - 0.05 * n1, cy + 0.30 * n2, cz),
               radii=(0.09 * n1, 0.05 * n2 + 0.5, 0.2 * n3), tensor=_diag(2.0e-3, 2.0e-3, 2.0e-3), s0=1.3),
    )


def default_spec(dims: GridDims | None = None, **kwargs) -> PhantomSpec:
    """Desk-scale default: 32x32 in-plane, 4 slabs of 5, 1 b=0 + 12 directions."""
    if dims is None:
        dims = GridDims(32, 32, 4, 13, voxel_size=(1.25, 1.25, 1.25))
    kwargs.setdefault("bvecs", default_scheme(1, dims.nd - 1))
    kwargs.setdefault("regions", default_regions(dims.n1, dims.n2, dims.n3))
    return PhantomSpec(dims=dims, **kwargs)


def label_map(spec: PhantomSpec) -> np.ndarray:
    d = spec.dims
    xx, yy, zz = np.meshgrid(np.arange(d.n1), np.arange(d.n2), np.arange(d.n3), indexing="ij")
    labels = np.zeros((d.n1, d.n2, d.n3), dtype=np.int32)
    for i, r in enumerate(spec.regions, start=1):
        labels[r.contains(xx, yy, zz)] = i
    return labels


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Single-tensor signals S0 exp(-b g^T D g), shape (nd, n1, n2, n3)."""
    labels = label_map(spec)
    g = spec.bvecs
    bvals = spec.bvals
    out = np.zeros(spec.dims.image_shape)
    for i, r in enumerate(spec.regions, start=1):
        t = np.asarray(r.tensor, dtype=float)
        adc = np.einsum("qi,ij,qj->q", g, t, g)
        sig = r.s0 * np.exp(-bvals * adc)
        out[:, labels == i] = sig[:, None]
    return out


def _gaussian_field(rng, n1, n2, scale):
    """Unit-variance periodic Gaussian random field with covariance exp(-r^2 / (2 scale^2))."""
    # kernel std scale / sqrt(2) so that kernel autocorrelation has std `scale`
    s = scale / np.sqrt(2.0)
    fx = np.fft.fftfreq(n1)[:, None]
    fy = np.fft.fftfreq(n2)[None, :]
    transfer = np.exp(-2 * (np.pi * s) ** 2 * (fx ** 2 + fy ** 2))
    energy = np.sum(transfer ** 2) / (n1 * n2)
    white = rng.standard_normal((n1, n2))
    field = np.fft.ifft2(np.fft.fft2(white) * transfer).real
    return field / np.sqrt(energy)


def make_motion_phase(spec: PhantomSpec) -> np.ndarray:
    """Independent smooth random phase per (slab, encoding, DWI)."""
    d = spec.dims
    out = np.zeros(d.slab_shape)
    if spec.phase.amplitude == 0:
        return out
    for s in range(d.ns):
        for k in range(d.k_enc):
            for q in range(d.nd):
                rng = np.random.default_rng([spec.seed, 1, s, k, q])
                out[s, k, q] = spec.phase.amplitude * _gaussian_field(rng, d.n1, d.n2, spec.phase.scale)
    return out


def radial_noise_profile(n1: int, n2: int, center_factor: float = 1.6) -> np.ndarray:
    """Noise std multiplier rising from 1 at the FOV edge to ``center_factor`` at the center."""
    x = (np.arange(n1) - (n1 - 1) / 2) / (n1 / 2)
    y = (np.arange(n2) - (n2 - 1) / 2) / (n2 / 2)
    r2 = np.clip(x[:, None] ** 2 + y[None, :] ** 2, 0, 1)
    return 1.0 + (center_factor - 1.0) * (1.0 - r2)


def complex_noise(shape, sigma, seed, tag=0):
    """i.i.d. complex Gaussian noise, std ``sigma`` per real/imag part.

    One RNG stream per (slab, encoding, DWI) image so that the result does
    not depend on how the work is split.
    """
    ns, k, nd, n1, n2 = shape
    out = np.empty(shape, dtype=complex)
    for s in range(ns):
        for e in range(k):
            for q in range(nd):
                rng = np.random.default_rng([seed, 2, tag, s, e, q])
                z = rng.standard_normal((2, n1, n2))
                out[s, e, q] = z[0] + 1j * z[1]
    return sigma * out


def simulate_acquisition(truth, truth_phase, enc: EncodingModel, pf: PartialFourierModel,
                         noise_sigma: float, seed: int, tag: int = 0, noise_profile=None):
    """b = G(exp(i p) * A f + noise).

    Noise is confined to the measured k-space lines, as it would be for
    zero-filled partial Fourier data.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    clean = np.exp(1j * truth_phase) * apply_rf_encoding(truth, enc)
    if noise_sigma == 0:
        return apply_partial_fourier(clean, pf)
    eta = complex_noise(clean.shape, noise_sigma, seed, tag)
    if noise_profile is not None:
        eta = eta * noise_profile
    return apply_partial_fourier(clean + eta, pf)


def simulate_dataset(spec: PhantomSpec, enc: EncodingModel | None = None,
                     pf: PartialFourierModel | None = None, n_repetitions: int = 3) -> SimulatedDataset:
    d = spec.dims
    enc = enc or EncodingModel()
    pf = pf or PartialFourierModel(d.n2, 0.75)
    truth = make_phantom(spec)
    phase = make_motion_phase(spec)
    profile = radial_noise_profile(d.n1, d.n2) if spec.noise_profile == "radial" else None
    reps = []
    for r in range(n_repetitions):
        reps.append(simulate_acquisition(truth, phase, enc, pf, spec.noise_sigma, spec.seed,
                                         tag=r, noise_profile=profile))
    return SimulatedDataset(truth, phase, reps, label_map(spec), spec)

