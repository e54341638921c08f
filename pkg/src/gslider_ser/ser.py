"""SNR-enhancing joint reconstruction.

Alternates two sub-problems on median-normalized data:

* magnitude step -- real image f minimizing the data misfit plus the
  joint-edge Huber penalty, solved by IRLS with PCG inner solves;
* phase step -- per-slab-image phase p minimizing the data misfit plus
  the exponentiated-phase smoothness penalty, solved by nonlinear CG.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np

from .conventional import (
    TikhonovParams,
    default_smoothing_scale,
    estimate_phase_lowres,
    phase_correct,
    tikhonov_recon,
)
from .core_model import (
    VOLUME_AXES,
    EncodingModel,
    PartialFourierModel,
    apply_partial_fourier,
    apply_rf_adjoint,
    apply_rf_encoding,
    laplacian,
    phase_penalty,
    phase_penalty_normal,
    weighted_degree,
)
from .linalg import pcg

log = logging.getLogger(__name__)


class SerDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SerParams:
    lambda1: float | None = None      # None -> balance the two phase-step terms at start
    lambda2: float = 0.4
    xi: float | None = None           # None -> quantile of initial joint-edge magnitudes
    xi_quantile: float = 0.75
    outer_iters: int = 20
    irls_iters: int = 10
    cg_iters: int = 60
    ncg_iters: int = 10
    cg_tol: float = 1e-8
    objective_tol: float = 1e-7
    monotone_slack: float = 1e-10

    def __post_init__(self):
        if self.lambda1 is not None and self.lambda1 < 0:
            raise ValueError("lambda1 must be nonnegative")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be nonnegative")
        if self.xi is not None and self.xi <= 0:
            raise ValueError("xi must be positive")
        for name in ("outer_iters", "irls_iters", "cg_iters", "ncg_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_dwi_medians(b):
    """Scale each DWI so its median |voxel| equals the median of the medians.

    Returns the scaled data and the per-DWI factors (multiply to normalize,
    divide to undo).
    """
    b = np.asarray(b)
    mags = np.abs(np.moveaxis(b, 2, 0)).reshape(b.shape[2], -1)
    med = np.median(mags, axis=1)
    if np.any(med <= 0):
        bad = np.flatnonzero(med <= 0).tolist()
        raise ValueError(f"DWI(s) {bad} have zero median magnitude")
    scales = np.median(med) / med
    return b * scales[None, None, :, None, None], scales


def unnormalize_image(f, scales):
    return f / np.asarray(scales)[:, None, None, None]


# ---------------------------------------------------------------------------
# Huber joint-edge penalty
# ---------------------------------------------------------------------------

def huber(t, xi):
    t = np.asarray(t, dtype=float)
    return np.where(t <= xi, t * t, 2.0 * xi * t - xi * xi)


def huber_weight(t, xi):
    """Half-quadratic majorizer weight psi'(t) / (2 t): 1 below xi, xi / t above."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(t <= xi, 1.0, xi / np.maximum(t, xi))


def joint_edge_magnitudes(f):
    """Per-axis arrays of sqrt(sum_q (f_n^q - f_m^q)^2) over 6-neighbor edges."""
    return [np.sqrt(np.sum(np.diff(f, axis=ax) ** 2, axis=0)) for ax in VOLUME_AXES]


def joint_edge_magnitude(f, n, m):
    """Edge magnitude between two voxels given as (x, y, z) index tuples."""
    f = np.asarray(f)
    d = f[(slice(None),) + tuple(n)] - f[(slice(None),) + tuple(m)]
    return float(np.sqrt(np.sum(d * d)))


def joint_edge_penalty(f, xi):
    """J(f); every unordered neighbor pair is counted from both ends."""
    return 2.0 * sum(float(np.sum(huber(t, xi))) for t in joint_edge_magnitudes(f))


def irls_weights(f, xi):
    return [huber_weight(t, xi) for t in joint_edge_magnitudes(f)]


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def model_data(f, p, enc, pf):
    return apply_partial_fourier(np.exp(1j * p) * apply_rf_encoding(f, enc), pf)


def data_term(f, p, b, enc, pf):
    r = b - model_data(f, p, enc, pf)
    return float(np.sum(r.real ** 2 + r.imag ** 2))


@dataclass(frozen=True)
class ObjectiveTerms:
    data: float
    phase: float
    edge: float
    total: float


def objective_terms(f, p, b, enc, pf, lambda1, lambda2, xi) -> ObjectiveTerms:
    d = data_term(f, p, b, enc, pf)
    r = phase_penalty(p)
    j = joint_edge_penalty(f, xi)
    return ObjectiveTerms(d, r, j, d + lambda1 * r + lambda2 * j)


def objective_value(f, p, b, enc, pf, lambda1, lambda2, xi) -> float:
    return objective_terms(f, p, b, enc, pf, lambda1, lambda2, xi).total


# ---------------------------------------------------------------------------
# magnitude step
# ---------------------------------------------------------------------------

class MagnitudeSystem:
    """Frozen weighted normal equations (N + 2 lambda2 L_w) f = Re(M^H b).

    N f = Re(A^H (e^{-ip} G (e^{ip} A f))).  The factor 2 on the Laplacian
    comes from each edge being counted from both of its voxels.
    """

    def __init__(self, p, enc: EncodingModel, pf: PartialFourierModel, lambda2, weights=None):
        self.p = np.asarray(p)
        self.ephase = np.exp(1j * self.p)
        self.enc = enc
        self.pf = pf
        self.lambda2 = float(lambda2)
        self.weights = weights
        ns, k, nd, n1, n2 = self.p.shape
        self.image_shape = (nd, n1, n2, ns * k)
        self._precond_blocks = self._build_preconditioner()

    def forward(self, f):
        return apply_partial_fourier(self.ephase * apply_rf_encoding(f, self.enc), self.pf)

    def adjoint(self, g):
        """Complex M^H g; the real part is what enters the normal equations."""
        return apply_rf_adjoint(np.conj(self.ephase) * apply_partial_fourier(g, self.pf), self.enc)

    def rhs(self, b):
        return np.real(self.adjoint(b))

    def normal(self, f):
        out = np.real(self.adjoint(self.forward(f)))
        if self.lambda2:
            out += 2.0 * self.lambda2 * laplacian(f, VOLUME_AXES, self.weights)
        return out

    def quadratic(self, f, b):
        """Data misfit plus the weighted quadratic edge term (the IRLS surrogate, up to a constant)."""
        r = b - self.forward(f)
        val = float(np.sum(r.real ** 2 + r.imag ** 2))
        if self.lambda2:
            diffs = [np.sum(np.diff(f, axis=ax) ** 2, axis=0) for ax in VOLUME_AXES]
            w = self.weights or [1.0] * 3
            val += 2.0 * self.lambda2 * sum(float(np.sum(wi * di)) for wi, di in zip(w, diffs))
        return val

    def _build_preconditioner(self):
        nd, n1, n2, n3 = self.image_shape
        k = self.enc.k_enc
        ns = n3 // k
        diag_g = self.pf.n_lines / self.pf.n_pe
        gram = np.real(self.enc.gram) * diag_g
        deg = weighted_degree((n1, n2, n3), VOLUME_AXES, self.weights)
        blocks = np.broadcast_to(gram, (n1, n2, ns, k, k)).copy()
        idx = np.arange(k)
        blocks[..., idx, idx] += 2.0 * self.lambda2 * deg.reshape(n1, n2, ns, k)
        return np.linalg.inv(blocks)

    def precond(self, r):
        nd, n1, n2, n3 = r.shape
        k = self.enc.k_enc
        r5 = r.reshape(nd, n1, n2, n3 // k, k)
        return np.einsum("xysjk,qxysk->qxysj", self._precond_blocks, r5, optimize=True).reshape(r.shape)

    def solve(self, rhs, x0=None, tol=1e-8, maxiter=200):
        return pcg(self.normal, rhs, x0=x0, precond=self.precond, tol=tol, maxiter=maxiter)


def irls_cost(f, p, b, enc, pf, lambda2, xi):
    """Data misfit plus lambda2 J(f) at fixed phase."""
    return data_term(f, p, b, enc, pf) + lambda2 * joint_edge_penalty(f, xi)


@dataclass
class IrlsResult:
    f: np.ndarray
    weights: list
    costs: list              # cost before the first and after every IRLS iteration
    cg_iterations: list


def magnitude_step_irls(b, p, enc, pf, lambda2, xi, f_init, irls_iters=10, cg_iters=60,
                        cg_tol=1e-8) -> IrlsResult:
    """Minimize ||b - G(e^{ip} A f)||^2 + lambda2 J(f) over real f by IRLS."""
    f = np.array(np.real(f_init), dtype=float)
    costs = [irls_cost(f, p, b, enc, pf, lambda2, xi)]
    cg_its = []
    weights = irls_weights(f, xi)
    for _ in range(irls_iters):
        system = MagnitudeSystem(p, enc, pf, lambda2, weights)
        f, info = system.solve(system.rhs(b), x0=f, tol=cg_tol, maxiter=cg_iters)
        cg_its.append(info.iterations)
        costs.append(irls_cost(f, p, b, enc, pf, lambda2, xi))
        weights = irls_weights(f, xi)
        if lambda2 == 0:
            break
    return IrlsResult(f, weights, costs, cg_its)


# ---------------------------------------------------------------------------
# phase step
# ---------------------------------------------------------------------------

def phase_objective(p, af, b, pf, lambda1):
    r = b - apply_partial_fourier(np.exp(1j * p) * af, pf)
    val = float(np.sum(r.real ** 2 + r.imag ** 2))
    if lambda1:
        val += lambda1 * phase_penalty(p)
    return val


def phase_gradient_af(p, af, b, pf, lambda1):
    u = np.exp(1j * p) * af
    g = 2.0 * np.imag(np.conj(u) * (apply_partial_fourier(u, pf) - apply_partial_fourier(b, pf)))
    if lambda1:
        g += 2.0 * lambda1 * np.imag(np.exp(-1j * p) * phase_penalty_normal(p))
    return g


def phase_gradient(p, f, b, enc, pf, lambda1):
    """Analytic gradient of the phase-step objective with respect to p."""
    return phase_gradient_af(p, apply_rf_encoding(f, enc), b, pf, lambda1)


@dataclass
class NcgResult:
    p: np.ndarray
    values: list
    iterations: int
    line_search_failures: int


def phase_step_ncg(b, af, p_init, pf, lambda1, max_iters=20, c_armijo=1e-4, max_backtracks=30,
                   grad_tol=1e-12) -> NcgResult:
    """Nonlinear CG, beta = max(0, min(beta_PR, beta_FR)), backtracking Armijo search.

    ``af`` is A f for the fixed magnitude.
    """
    p = np.array(p_init, dtype=float)
    val = phase_objective(p, af, b, pf, lambda1)
    g = phase_gradient_af(p, af, b, pf, lambda1)
    gg = float(np.sum(g * g))
    values = [val]
    failures = 0
    if np.sqrt(gg) <= grad_tol:
        return NcgResult(p, values, 0, 0)
    d = -g
    # first trial step moves the phase by at most 0.1 rad
    step = 0.1 / max(float(np.max(np.abs(d))), 1e-300)
    it = 0
    while it < max_iters:
        slope = float(np.sum(g * d))
        if slope >= 0:
            d = -g
            slope = -gg
        alpha = step
        accepted = False
        for _ in range(max_backtracks):
            p_try = p + alpha * d
            v_try = phase_objective(p_try, af, b, pf, lambda1)
            if v_try <= val + c_armijo * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted and not np.array_equal(d, -g):
            # fall back to steepest descent with a diminishing step
            failures += 1
            d = -g
            slope = -gg
            alpha = step
            for _ in range(max_backtracks):
                p_try = p + alpha * d
                v_try = phase_objective(p_try, af, b, pf, lambda1)
                if v_try <= val + c_armijo * alpha * slope:
                    accepted = True
                    break
                alpha *= 0.5
        if not accepted:
            failures += 1
            log.info("phase line search failed at iteration %d; stopping", it)
            break
        it += 1
        p, val = p_try, v_try
        values.append(val)
        g_new = phase_gradient_af(p, af, b, pf, lambda1)
        gg_new = float(np.sum(g_new * g_new))
        if np.sqrt(gg_new) <= grad_tol:
            g, gg = g_new, gg_new
            break
        beta_fr = gg_new / gg
        beta_pr = float(np.sum(g_new * (g_new - g))) / gg
        beta = max(0.0, min(beta_pr, beta_fr))
        d = -g_new + beta * d
        g, gg = g_new, gg_new
        # next trial step: twice the accepted one
        step = 2.0 * alpha
    return NcgResult(p, values, it, failures)


# ---------------------------------------------------------------------------
# outer alternation
# ---------------------------------------------------------------------------

@dataclass
class SerState:
    f: np.ndarray                   # normalized-domain image
    p: np.ndarray
    dwi_scales: np.ndarray
    lambda1: float
    lambda2: float
    xi: float
    irls_weights: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)   # list of ObjectiveTerms
    irls_costs: list = field(default_factory=list)          # one list per outer iteration
    ncg_values: list = field(default_factory=list)


@dataclass
class SerResult:
    f: np.ndarray          # un-normalized real image (nd, n1, n2, n3)
    p: np.ndarray
    state: SerState

    @property
    def history(self):
        return self.state.objective_history

    def __iter__(self):
        return iter((self.f, self.p, self.history))


def default_xi(f, quantile=0.75):
    t = np.concatenate([m.ravel() for m in joint_edge_magnitudes(f)])
    xi = float(np.quantile(t, quantile))
    return xi if xi > 0 else 1.0


def default_lambda1(f, p, b, enc, pf):
    """Make the phase penalty comparable to the data misfit at initialization."""
    r = phase_penalty(p)
    d = data_term(f, p, b, enc, pf)
    if r <= 0 or d <= 0:
        return 1e-3
    return d / r


def ser_initialize(b, enc, pf, tik: TikhonovParams = TikhonovParams(), smoothing_scale=None):
    """Low-resolution phase and phase-corrected Tikhonov image."""
    if smoothing_scale is None:
        smoothing_scale = default_smoothing_scale(pf)
    p0 = estimate_phase_lowres(b, smoothing_scale)
    f0 = tikhonov_recon(phase_correct(b, p0), enc, tik)
    return f0, p0


def ser_reconstruct(b, enc: EncodingModel, pf: PartialFourierModel, params: SerParams = SerParams(),
                    f_init=None, p_init=None, tik: TikhonovParams = TikhonovParams(),
                    log_callback=None) -> SerResult:
    """Alternating magnitude / phase minimization of the joint objective."""
    bn, scales = normalize_dwi_medians(b)
    f0, p0 = ser_initialize(bn, enc, pf, tik)
    if f_init is not None:
        f0 = np.asarray(f_init, dtype=float) * scales[:, None, None, None]
    if p_init is not None:
        p0 = np.array(p_init, dtype=float)
    xi = params.xi if params.xi is not None else default_xi(f0, params.xi_quantile)
    lam1 = params.lambda1 if params.lambda1 is not None else default_lambda1(f0, p0, bn, enc, pf)
    lam2 = params.lambda2
    state = SerState(f0, p0, scales, lam1, lam2, xi)

    def record(it):
        terms = objective_terms(state.f, state.p, bn, enc, pf, lam1, lam2, xi)
        state.objective_history.append(terms)
        if log_callback is not None:
            log_callback(it, terms)
        return terms

    prev = record(0).total
    for it in range(1, params.outer_iters + 1):
        mag = magnitude_step_irls(bn, state.p, enc, pf, lam2, xi, state.f, params.irls_iters,
                                  params.cg_iters, params.cg_tol)
        state.f = mag.f
        state.irls_costs.append(mag.costs)
        af = apply_rf_encoding(state.f, enc)
        ph = phase_step_ncg(bn, af, state.p, pf, lam1, params.ncg_iters)
        state.p = ph.p
        state.ncg_values.append(ph.values)
        cur = record(it).total
        if cur > prev * (1 + params.monotone_slack) + 1e-300:
            raise SerDivergenceError(f"objective increased at outer iteration {it}: {prev!r} -> {cur!r}")
        rel = (prev - cur) / max(abs(prev), 1e-300)
        prev = cur
        if rel < params.objective_tol:
            break
    state.irls_weights = irls_weights(state.f, xi)
    return SerResult(unnormalize_image(state.f, scales), state.p, state)
