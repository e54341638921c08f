import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gslider_ser.conventional import (
    TikhonovParams,
    conventional_recon,
    default_lambda,
    estimate_phase_lowres,
    lowres_window,
    phase_correct,
    tikhonov_operator,
    tikhonov_recon,
    average_repetitions,
)
from gslider_ser.core_model import EncodingModel, GridDims, PartialFourierModel, apply_rf_encoding, forward_model

from conftest import rand_image, rel


def dense_tikhonov(enc, lam, y):
    """(A^H A + lam I)^-1 A^H y on a stacked per-slab system, built with kron."""
    ns, k, nd, n1, n2 = y.shape
    a = np.kron(np.eye(ns), enc.profile_matrix)
    yv = np.moveaxis(y, (0, 1), (-2, -1)).reshape(nd * n1 * n2, ns * k)
    x = np.linalg.solve(a.conj().T @ a + lam * np.eye(ns * k), a.conj().T @ yv.T).T
    return np.real(x).reshape(nd, n1, n2, ns * k)


def test_default_lambda_value():
    assert default_lambda(EncodingModel()) == pytest.approx(0.02 * 25 / 5)
    assert TikhonovParams().resolve(EncodingModel()) == pytest.approx(0.1)


def test_tikhonov_matches_dense_closed_form():
    t0 = time.perf_counter()
    for i in range(20):
        rng = np.random.default_rng(100 + i)
        k = int(rng.integers(2, 7))
        m = rng.standard_normal((k, k)) + k * np.eye(k)
        enc = EncodingModel(m)
        lam = float(rng.uniform(0, 1.0))
        y = rng.standard_normal((int(rng.integers(1, 4)), k, 2, 3, 4))
        got = tikhonov_recon(y, enc, TikhonovParams(lam))
        assert rel(got, dense_tikhonov(enc, lam, y)) < 1e-8
    assert time.perf_counter() - t0 < 5


def test_singular_encoding_without_regularization_raises():
    enc = EncodingModel(np.ones((5, 5)))
    with pytest.raises(np.linalg.LinAlgError, match="cond"):
        tikhonov_operator(enc, 0.0)
    tikhonov_operator(enc, 0.1)


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        TikhonovParams(-1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), l1=st.floats(1e-3, 1.0), factor=st.floats(1.5, 20.0))
def test_solution_norm_decreases_with_lambda(seed, l1, factor):
    rng = np.random.default_rng(seed)
    enc = EncodingModel()
    y = rng.standard_normal((2, 5, 1, 3, 3))
    n1 = np.linalg.norm(tikhonov_recon(y, enc, TikhonovParams(l1)))
    n2 = np.linalg.norm(tikhonov_recon(y, enc, TikhonovParams(l1 * factor)))
    assert n2 <= n1 * (1 + 1e-12)


def test_noiseless_full_sampling_zero_phase_recovers_truth(rng):
    dims = GridDims(8, 8, 2, 2)
    enc = EncodingModel()
    f = rand_image(rng, dims)
    y = apply_rf_encoding(f, enc)
    assert rel(tikhonov_recon(y, enc, TikhonovParams(0.0)), f) < 1e-12


def test_smooth_phase_is_recovered_from_partial_fourier():
    dims = GridDims(32, 32, 1, 1)
    enc, pf = EncodingModel(), PartialFourierModel(32, 0.75)
    x, y = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    f = np.ones(dims.image_shape) + 0.1
    p = np.broadcast_to(0.5 * np.sin(2 * np.pi * x / 32) + 0.3 * np.cos(2 * np.pi * y / 32), dims.slab_shape)
    b = forward_model(f, p, enc, pf)
    p_hat = estimate_phase_lowres(b, 4.0)
    err = np.angle(np.exp(1j * (p_hat - p)))
    assert np.sqrt(np.mean(err ** 2)) < 0.05


def test_phase_correction_shape_mismatch():
    with pytest.raises(ValueError):
        phase_correct(np.zeros((1, 5, 1, 4, 4)), np.zeros((1, 5, 1, 4, 3)))


def test_zero_data_warns():
    with pytest.warns(RuntimeWarning):
        estimate_phase_lowres(np.zeros((1, 5, 1, 8, 8), complex))


def test_window_is_separable_and_peaks_at_center():
    w = lowres_window(16, 12, 4.0)
    assert w.shape == (16, 12)
    assert np.unravel_index(np.argmax(w), w.shape) == (8, 6)
    assert np.linalg.matrix_rank(w) == 1


def test_conventional_recon_close_to_truth_without_noise(rng):
    from gslider_ser import phantom
    spec = phantom.default_spec(noise_sigma=0.0)
    enc, pf = EncodingModel(), PartialFourierModel(32, 0.75)
    ds = phantom.simulate_dataset(spec, enc, pf, n_repetitions=1)
    f, p = conventional_recon(ds.repetitions[0], enc, pf)
    mask = ds.labels > 0
    assert rel(f[:, mask], ds.truth[:, mask]) < 0.1
    assert p.shape == ds.truth_phase.shape


def test_average_repetitions():
    a, b = np.ones((2, 2)), 3 * np.ones((2, 2))
    assert np.allclose(average_repetitions([a, b]), 2)
    with pytest.raises(ValueError):
        average_repetitions([a, np.ones(3)])
    with pytest.raises(ValueError):
        average_repetitions([])
