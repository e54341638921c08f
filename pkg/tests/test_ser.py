import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gslider_ser import phantom
from gslider_ser.conventional import conventional_recon
from gslider_ser.core_model import (
    EncodingModel,
    GridDims,
    NeighborSystem,
    PartialFourierModel,
    apply_rf_encoding,
    forward_model,
)
from gslider_ser.dti_metrics import nrmse
from gslider_ser.ser import (
    MagnitudeSystem,
    SerDivergenceError,
    SerParams,
    data_term,
    huber,
    huber_weight,
    irls_cost,
    joint_edge_magnitude,
    joint_edge_penalty,
    magnitude_step_irls,
    normalize_dwi_medians,
    objective_value,
    phase_gradient,
    phase_objective,
    phase_step_ncg,
    ser_reconstruct,
    unnormalize_image,
)

from conftest import dense_forward, rand_image, rand_phase, rand_slab, rel


# ---------------------------------------------------------------------------
# Huber and edges
# ---------------------------------------------------------------------------

def test_huber_branches():
    assert huber(1.0, 2.0) == 1.0
    assert huber(3.0, 1.0) == 5.0
    xi = 1.7
    eps = 1e-7
    assert huber(xi - eps, xi) == pytest.approx(huber(xi + eps, xi), abs=1e-6)
    slope_lo = (huber(xi, xi) - huber(xi - eps, xi)) / eps
    slope_hi = (huber(xi + eps, xi) - huber(xi, xi)) / eps
    assert slope_lo == pytest.approx(2 * xi, rel=1e-5)
    assert slope_hi == pytest.approx(2 * xi, rel=1e-5)


def test_huber_weight_values():
    assert huber_weight(0.5, 1.0) == 1.0
    assert huber_weight(4.0, 2.0) == pytest.approx(0.5)
    assert huber_weight(0.0, 1.0) == 1.0


@settings(max_examples=200, deadline=None)
@given(t0=st.floats(0, 10), t=st.floats(0, 10), xi=st.floats(0.05, 5))
def test_huber_majorizer_is_tangent_and_above(t0, t, xi):
    w = float(huber_weight(t0, xi))
    surrogate = huber(t0, xi) + w * (t * t - t0 * t0)
    assert surrogate >= huber(t, xi) - 1e-9 * max(1.0, t * t)
    dpsi = 2 * t0 if t0 <= xi else 2 * xi
    assert 2 * w * t0 == pytest.approx(dpsi, rel=1e-12, abs=1e-12)


def test_joint_edge_magnitude_examples(rng):
    f = np.zeros((3, 2, 1, 1))
    assert joint_edge_magnitude(f, (0, 0, 0), (1, 0, 0)) == 0.0
    f[0, 1], f[1, 1] = 3.0, 4.0
    assert joint_edge_magnitude(f, (0, 0, 0), (1, 0, 0)) == pytest.approx(5.0)
    g = rng.standard_normal((4, 3, 3, 2))
    brute = np.sqrt(sum((g[q, 1, 2, 0] - g[q, 1, 2, 1]) ** 2 for q in range(4)))
    assert joint_edge_magnitude(g, (1, 2, 0), (1, 2, 1)) == pytest.approx(brute, rel=1e-14)


def brute_objective(f, p, b, enc, pf, lam1, lam2, xi):
    """Direct summation: data + lam1 sum_n sum_m |e^{ip_n} - e^{ip_m}|^2 + lam2 sum_n sum_m psi(.)"""
    data = float(np.sum(np.abs(b - forward_model(f, p, enc, pf)) ** 2))
    nd, n1, n2, n3 = f.shape
    ns, k = p.shape[:2]
    nb2 = NeighborSystem((n1, n2, 1)).inplane_4
    r = 0.0
    for s in range(ns):
        for e in range(k):
            for q in range(nd):
                z = np.exp(1j * p[s, e, q]).ravel()
                for n, nbrs in enumerate(nb2):
                    for m in nbrs:
                        r += abs(z[n] - z[m]) ** 2
    nb3 = NeighborSystem((n1, n2, n3)).volumetric_6
    flat = f.reshape(nd, -1)
    j = 0.0
    for n, nbrs in enumerate(nb3):
        for m in nbrs:
            t = np.sqrt(np.sum((flat[:, n] - flat[:, m]) ** 2))
            j += t * t if t <= xi else 2 * xi * t - xi * xi
    return data + lam1 * r + lam2 * j


def test_objective_matches_brute_force(rng):
    dims = GridDims(4, 5, 2, 2)
    enc, pf = EncodingModel(), PartialFourierModel(5, 0.75)
    f, p, b = rand_image(rng, dims), rand_phase(rng, dims), rand_slab(rng, dims)
    got = objective_value(f, p, b, enc, pf, 0.3, 0.7, 1.1)
    assert got == pytest.approx(brute_objective(f, p, b, enc, pf, 0.3, 0.7, 1.1), rel=1e-10)


def test_objective_zero_at_truth(rng, small):
    dims, enc, pf = small
    f, p = rand_image(rng, dims), rand_phase(rng, dims)
    b = forward_model(f, p, enc, pf)
    assert objective_value(f, p, b, enc, pf, 0.0, 0.0, 1.0) == pytest.approx(0.0, abs=1e-20)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def test_normalization_examples(rng, small):
    dims, _, _ = small
    b = rand_slab(rng, dims)
    b10 = b.copy()
    b10[:, :, 1] *= 10
    _, s = normalize_dwi_medians(b10)
    _, s0 = normalize_dwi_medians(b)
    assert s[1] / s[0] == pytest.approx(s0[1] / s0[0] / 10, rel=1e-12)
    same = np.broadcast_to(b[:, :, :1], b.shape)
    assert np.allclose(normalize_dwi_medians(same)[1], 1.0)
    bn, s = normalize_dwi_medians(b)
    assert rel(bn / s[None, None, :, None, None], b) < 1e-12
    f = rand_image(rng, dims)
    assert rel(unnormalize_image(f * s[:, None, None, None], s), f) < 1e-12


def test_zero_dwi_rejected(rng, small):
    dims, _, _ = small
    b = rand_slab(rng, dims)
    b[:, :, 2] = 0
    with pytest.raises(ValueError, match="zero median"):
        normalize_dwi_medians(b)


def test_params_validation():
    with pytest.raises(ValueError):
        SerParams(xi=0.0)
    with pytest.raises(ValueError):
        SerParams(lambda2=-1)
    with pytest.raises(ValueError):
        SerParams(outer_iters=0)


# ---------------------------------------------------------------------------
# magnitude step
# ---------------------------------------------------------------------------

def test_irls_identity_system_returns_real_part(rng):
    dims = GridDims(4, 4, 1, 2)
    enc, pf = EncodingModel(np.eye(5)), PartialFourierModel(4, 1.0)
    b = rand_slab(rng, dims)
    res = magnitude_step_irls(b, np.zeros(dims.slab_shape), enc, pf, 0.0, 1.0, np.zeros(dims.image_shape))
    expected = np.moveaxis(b.real, (0, 1), (-2, -1)).reshape(dims.image_shape)
    assert rel(res.f, expected) < 1e-10
    assert not np.iscomplexobj(res.f)


def test_irls_quadratic_regime_matches_dense_solve(rng):
    dims = GridDims(4, 4, 2, 2)
    enc, pf = EncodingModel(), PartialFourierModel(4, 0.75)
    p, b = rand_phase(rng, dims), rand_slab(rng, dims)
    lam2 = 0.37
    res = magnitude_step_irls(b, p, enc, pf, lam2, 1e12, np.zeros(dims.image_shape), irls_iters=1,
                              cg_iters=2000, cg_tol=1e-13)
    m = dense_forward(dims, enc, pf, p)
    nd, n1, n2, n3 = dims.image_shape
    inc = NeighborSystem((n1, n2, n3)).incidence("volumetric_6")
    dv = np.kron(inc, np.eye(nd))
    # image vector ordered (x, y, z, dwi) for the difference operator
    perm = np.arange(nd * n1 * n2 * n3).reshape(nd, n1, n2, n3).transpose(1, 2, 3, 0).ravel()
    mp = m[:, perm]
    lhs = np.real(mp.conj().T @ mp) + lam2 * dv.T @ dv
    rhs = np.real(mp.conj().T @ b.ravel())
    x = np.linalg.solve(lhs, rhs)
    expected = np.empty(nd * n1 * n2 * n3)
    expected[perm] = x
    assert rel(res.f.ravel(), expected) < 1e-8


def test_irls_cost_non_increasing(rng):
    spec = phantom.default_spec(GridDims(16, 16, 2, 7, voxel_size=(1.25,) * 3), noise_sigma=0.1)
    enc, pf = EncodingModel(), PartialFourierModel(16, 0.75)
    ds = phantom.simulate_dataset(spec, enc, pf, n_repetitions=1)
    f0, p0 = conventional_recon(ds.repetitions[0], enc, pf)
    res = magnitude_step_irls(ds.repetitions[0], p0, enc, pf, 0.5, 0.05, f0, irls_iters=6)
    c = res.costs
    assert all(c[i + 1] <= c[i] * (1 + 1e-10) for i in range(len(c) - 1))
    assert c[-1] < c[0]


def test_larger_lambda2_gives_smaller_edge_penalty(rng):
    spec = phantom.default_spec(GridDims(16, 16, 2, 4, voxel_size=(1.25,) * 3), noise_sigma=0.1)
    enc, pf = EncodingModel(), PartialFourierModel(16, 0.75)
    ds = phantom.simulate_dataset(spec, enc, pf, n_repetitions=1)
    f0, p0 = conventional_recon(ds.repetitions[0], enc, pf)
    xi = 0.1
    js = []
    for lam in (0.1, 1.0, 10.0):
        res = magnitude_step_irls(ds.repetitions[0], p0, enc, pf, lam, xi, f0, irls_iters=8, cg_iters=300)
        js.append(joint_edge_penalty(res.f, xi))
    assert js[0] > js[1] > js[2]


def test_magnitude_system_is_symmetric_positive(rng, small):
    dims, enc, pf = small
    sys = MagnitudeSystem(rand_phase(rng, dims), enc, pf, 0.4)
    x, y = rand_image(rng, dims), rand_image(rng, dims)
    assert float(np.sum(y * sys.normal(x))) == pytest.approx(float(np.sum(x * sys.normal(y))), rel=1e-12)
    assert float(np.sum(x * sys.normal(x))) > 0


def test_data_term_scales_quadratically(rng, small):
    dims, enc, pf = small
    f, p, b = rand_image(rng, dims), rand_phase(rng, dims), rand_slab(rng, dims)
    assert data_term(3 * f, p, 3 * b, enc, pf) == pytest.approx(9 * data_term(f, p, b, enc, pf), rel=1e-12)


def test_quadratic_minimizer_is_scale_equivariant(rng, small):
    dims, enc, pf = small
    p, b = rand_phase(rng, dims), rand_slab(rng, dims)
    f1 = magnitude_step_irls(b, p, enc, pf, 0.5, 1e12, np.zeros(dims.image_shape), 1, 1000, 1e-13).f
    f2 = magnitude_step_irls(4 * b, p, enc, pf, 0.5, 1e12, np.zeros(dims.image_shape), 1, 1000, 1e-13).f
    assert rel(f2, 4 * f1) < 1e-9


# ---------------------------------------------------------------------------
# phase step
# ---------------------------------------------------------------------------

def test_gradient_matches_central_differences():
    t0 = time.perf_counter()
    for trial in range(10):
        rng = np.random.default_rng(500 + trial)
        dims = GridDims(6, 6, 1, 2)
        enc, pf = EncodingModel(), PartialFourierModel(6, 0.75)
        f, p, b = rand_image(rng, dims), rand_phase(rng, dims), rand_slab(rng, dims)
        lam1 = float(rng.uniform(0.1, 2))
        g = phase_gradient(p, f, b, enc, pf, lam1)
        af = apply_rf_encoding(f, enc)
        h = 1e-5
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            e = np.zeros_like(p)
            e[idx] = h
            fd[idx] = (phase_objective(p + e, af, b, pf, lam1) - phase_objective(p - e, af, b, pf, lam1)) / (2 * h)
        assert rel(g, fd) < 1e-6
    assert time.perf_counter() - t0 < 30


def test_gradient_zero_at_consistent_point(rng, small):
    dims, enc, pf = small
    f, p = rand_image(rng, dims), rand_phase(rng, dims)
    b = forward_model(f, p, enc, pf)
    assert np.max(np.abs(phase_gradient(p, f, b, enc, pf, 0.0))) < 1e-12
    c = np.full(dims.slab_shape, 0.4)
    zero = np.zeros(dims.image_shape)
    assert np.max(np.abs(phase_gradient(c, zero, b, enc, pf, 3.0))) < 1e-12


def test_ncg_stationary_start_unchanged(rng, small):
    dims, enc, pf = small
    f, p = rand_image(rng, dims), rand_phase(rng, dims)
    b = forward_model(f, p, enc, pf)
    res = phase_step_ncg(b, apply_rf_encoding(f, enc), p, pf, 0.0)
    assert np.array_equal(res.p, p)


def test_ncg_non_increasing_over_50_iterations(rng, small):
    dims, enc, pf = small
    f, p, b = rand_image(rng, dims), rand_phase(rng, dims), rand_slab(rng, dims)
    res = phase_step_ncg(b, apply_rf_encoding(f, enc), p, pf, 0.5, max_iters=50)
    v = res.values
    assert len(v) > 10
    assert all(v[i + 1] <= v[i] for i in range(len(v) - 1))


def test_ncg_recovers_phase_from_nearby_start():
    spec = phantom.default_spec(GridDims(16, 16, 1, 2, voxel_size=(1.25,) * 3), noise_sigma=0.0)
    enc, pf = EncodingModel(), PartialFourierModel(16, 0.75)
    truth = phantom.make_phantom(spec)
    p_true = phantom.make_motion_phase(spec)
    b = forward_model(truth, p_true, enc, pf)
    rng = np.random.default_rng(3)
    af = apply_rf_encoding(truth, enc)
    res = phase_step_ncg(b, af, p_true + 0.1 * rng.standard_normal(p_true.shape), pf, 0.0, max_iters=300)
    err = np.abs(np.angle(np.exp(1j * (res.p - p_true))))
    strong = np.abs(af) > 0.2 * np.max(np.abs(af))
    assert np.median(err[strong]) < 0.02
    assert np.mean(err[strong] < 0.02) > 0.9


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def test_noiseless_unregularized_recovers_truth():
    # full sampling: with lambda1 = 0 and 6/8 partial Fourier the free phase has more
    # unknowns than the missing half-plane leaves measurements for
    spec = phantom.default_spec(GridDims(16, 16, 1, 3, voxel_size=(1.25,) * 3), noise_sigma=0.0)
    enc, pf = EncodingModel(), PartialFourierModel(16, 1.0)
    ds = phantom.simulate_dataset(spec, enc, pf, n_repetitions=1)
    res = ser_reconstruct(ds.repetitions[0], enc, pf,
                          SerParams(lambda1=0.0, lambda2=0.0, outer_iters=200, irls_iters=1, cg_iters=500,
                                    cg_tol=1e-12, ncg_iters=50, objective_tol=1e-14),
                          p_init=ds.truth_phase + 0.05)
    assert nrmse(res.f, ds.truth) < 1e-4


def test_outer_objective_monotone_and_unnormalized(rng):
    spec = phantom.default_spec(GridDims(16, 16, 1, 4, voxel_size=(1.25,) * 3), noise_sigma=0.1)
    enc, pf = EncodingModel(), PartialFourierModel(16, 0.75)
    ds = phantom.simulate_dataset(spec, enc, pf, n_repetitions=1)
    res = ser_reconstruct(ds.repetitions[0], enc, pf, SerParams(outer_iters=5, irls_iters=3))
    tot = [h.total for h in res.history]
    assert all(tot[i + 1] <= tot[i] * (1 + 1e-10) for i in range(len(tot) - 1))
    assert not np.iscomplexobj(res.f)
    assert np.all(res.state.dwi_scales > 0)
    # returned image lives on the data scale, not the normalized one
    assert nrmse(res.f, ds.truth, ds.labels > 0) < 0.2
    f, p, hist = res
    assert hist is res.history


def test_single_dwi_runs(rng):
    spec = phantom.default_spec(GridDims(8, 8, 1, 1, voxel_size=(1.25,) * 3), bvecs=np.zeros((1, 3)),
                                noise_sigma=0.05)
    enc, pf = EncodingModel(), PartialFourierModel(8, 0.75)
    ds = phantom.simulate_dataset(spec, enc, pf, n_repetitions=1)
    res = ser_reconstruct(ds.repetitions[0], enc, pf, SerParams(outer_iters=2, irls_iters=2))
    assert res.f.shape == (1, 8, 8, 5)


def test_divergence_is_a_hard_error(monkeypatch, rng, small):
    dims, enc, pf = small
    b = forward_model(np.abs(rand_image(rng, dims)) + 1, rand_phase(rng, dims, 0.1), enc, pf)
    import gslider_ser.ser as ser_mod
    real_terms = ser_mod.objective_terms
    calls = {"n": 0}

    def inflated(*a, **k):
        t = real_terms(*a, **k)
        calls["n"] += 1
        return ser_mod.ObjectiveTerms(t.data, t.phase, t.edge, t.total * (1 + calls["n"]))

    monkeypatch.setattr(ser_mod, "objective_terms", inflated)
    with pytest.raises(SerDivergenceError):
        ser_reconstruct(b, enc, pf, SerParams(outer_iters=3, irls_iters=1))


def test_shared_edge_preserved_while_noise_drops():
    """Two flat half-volumes with an edge shared by every DWI."""
    dims = GridDims(16, 16, 2, 6)
    enc, pf = EncodingModel(), PartialFourierModel(16, 1.0)
    truth = np.ones(dims.image_shape)
    truth[:, 8:] = 2.0
    truth *= np.linspace(1.0, 0.6, 6)[:, None, None, None]
    sigma = 0.08
    p = np.zeros(dims.slab_shape)
    noisy = [phantom.simulate_acquisition(truth, p, enc, pf, sigma, seed=s) for s in range(2)]
    conv = conventional_recon(noisy[0], enc, pf)[0]
    res = ser_reconstruct(noisy[0], enc, pf, SerParams(lambda2=2.0, outer_iters=4, irls_iters=6,
                                                       cg_iters=200), p_init=p)
    f = res.f
    edge_true = truth[:, 8] - truth[:, 7]
    edge_ser = f[:, 9:11].mean(axis=1) - f[:, 5:7].mean(axis=1)
    assert np.mean(edge_ser) >= 0.8 * np.mean(edge_true)
    inner_ser = np.std(f[:, 2:5, 2:14, 2:8] - truth[:, 2:5, 2:14, 2:8])
    inner_conv = np.std(conv[:, 2:5, 2:14, 2:8] - truth[:, 2:5, 2:14, 2:8])
    assert inner_conv / inner_ser >= np.sqrt(3)
    step_ser = np.mean(f[:, 8] - f[:, 7], axis=(1, 2))
    assert np.all(step_ser >= 0.8 * np.mean(edge_true, axis=(1, 2)))
