import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gslider_ser.dti_metrics import (
    DiffusionScheme,
    Report,
    TensorField,
    color_fa,
    evaluation_report,
    fa,
    fa_from_eigenvalues,
    fit_dti,
    md,
    nrmse,
    synthesize,
    tensor_components,
)
from gslider_ser.phantom import default_scheme


def scheme(n_b0=1, n_dirs=12, b=1000.0):
    g = default_scheme(n_b0, n_dirs)
    return DiffusionScheme(np.where(np.arange(len(g)) < n_b0, 0.0, b), g)


def random_tensors(rng, shape):
    q, _ = np.linalg.qr(rng.standard_normal(shape + (3, 3)))
    ev = rng.uniform(0.2e-3, 2.5e-3, shape + (3,))
    return np.einsum("...ij,...j,...kj->...ik", q, ev, q)


def test_fa_closed_forms():
    assert fa(np.eye(3) * 1e-3) == pytest.approx(0.0, abs=1e-10)
    assert fa(np.diag([1e-3, 0.0, 0.0])) == pytest.approx(1.0, abs=1e-10)
    assert fa(np.diag([2.0, 1.0, 1.0])) == pytest.approx(1 / np.sqrt(6), abs=1e-10)
    assert 1 / np.sqrt(6) == pytest.approx(0.4082, abs=1e-4)
    assert md(np.diag([3e-3, 2e-3, 1e-3])) == pytest.approx(2e-3, abs=1e-15)


def test_fa_degenerate_inputs():
    assert fa(np.zeros((3, 3))) == 0.0
    # a negative eigenvalue is clamped, so the result stays within [0, 1]
    assert 0.0 <= fa(np.diag([1e-3, 1e-3, -5e-4])) <= 1.0
    assert fa_from_eigenvalues(np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 2.0]])) == pytest.approx([0.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_fa_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    t = random_tensors(rng, ())
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    assert fa(q @ t @ q.T) == pytest.approx(fa(t), abs=1e-10)
    assert md(q @ t @ q.T) == pytest.approx(md(t), abs=1e-15)


def test_components_round_trip(rng):
    t = random_tensors(rng, (4, 3))
    tf = TensorField(tensor_components(t), np.ones((4, 3)), np.zeros((4, 3), bool))
    assert np.allclose(tf.matrices(), t, atol=0)
    assert np.allclose(md(tf), md(t), atol=1e-18)


def test_noiseless_fit_recovers_tensors(rng):
    sc = scheme()
    t = random_tensors(rng, (5, 4, 3))
    truth = TensorField(tensor_components(t), rng.uniform(0.5, 2.0, (5, 4, 3)), np.zeros((5, 4, 3), bool))
    fit = fit_dti(synthesize(truth, sc), sc)
    assert np.max(np.abs(fit.components - truth.components)) < 1e-10
    assert np.allclose(fit.s0, truth.s0, rtol=1e-10)
    assert not fit.clamped.any()
    wfit = fit_dti(synthesize(truth, sc), sc, weighted=True)
    assert np.max(np.abs(wfit.components - truth.components)) < 1e-10


def test_fit_respects_mask(rng):
    sc = scheme()
    t = random_tensors(rng, (3, 3))
    truth = TensorField(tensor_components(t), np.ones((3, 3)), np.zeros((3, 3), bool))
    mask = np.zeros((3, 3), bool)
    mask[1, 1] = True
    fit = fit_dti(synthesize(truth, sc), sc, mask)
    assert np.all(fit.components[~mask] == 0)
    assert np.max(np.abs(fit.components[mask] - truth.components[mask])) < 1e-10


def test_rank_deficient_design_rejected():
    # six directions all along x cannot resolve the off-diagonal terms
    g = np.array([[0, 0, 0]] + [[1.0, 0, 0]] * 6)
    sc = DiffusionScheme(np.array([0.0] + [1000.0] * 6), g)
    with pytest.raises(np.linalg.LinAlgError):
        fit_dti(np.ones((7, 2)), sc)
    with pytest.raises(np.linalg.LinAlgError):
        fit_dti(np.ones((5, 2)), scheme(1, 4))


def test_scheme_validation():
    with pytest.raises(ValueError):
        DiffusionScheme(np.array([0.0, 1000.0]), np.array([[0, 0, 0], [2.0, 0, 0]]))
    with pytest.raises(ValueError):
        DiffusionScheme(np.array([0.0, 1000.0]), np.zeros((3, 3)))


def test_nonpositive_signal_clamped_with_warning():
    sc = scheme()
    s = np.ones((13, 2))
    s[4, 0] = -0.1
    with pytest.warns(RuntimeWarning, match="clamped"):
        fit = fit_dti(s, sc)
    assert fit.clamped.tolist() == [True, False]
    assert np.all(np.isfinite(fit.components))


def test_color_fa_points_along_principal_axis():
    rgb = color_fa(np.diag([0.3e-3, 1.7e-3, 0.3e-3]))
    assert rgb[1] == pytest.approx(fa(np.diag([0.3e-3, 1.7e-3, 0.3e-3])))
    assert rgb[0] == pytest.approx(0.0, abs=1e-12) and rgb[2] == pytest.approx(0.0, abs=1e-12)


def test_nrmse_cases(rng):
    g = rng.standard_normal((3, 4, 4))
    assert nrmse(g, g) == 0.0
    assert nrmse(2 * g, g) == pytest.approx(1.0)
    mask = np.zeros((4, 4), bool)
    mask[:2] = True
    assert nrmse(g + 0 * g, g, mask) == 0.0
    with pytest.raises(ValueError):
        nrmse(g, g, np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        nrmse(g, np.zeros_like(g))
    with pytest.raises(ValueError):
        nrmse(g[:2], g)


def test_report_tsv_round_trip_is_lossless(rng):
    rows = [{"variant": v, "dwi_nrmse": float(rng.random()), "md_nrmse": 1 / 3, "fa_nrmse": 1e-17,
             "fa_nrmse_wm": float("nan")} for v in ("conventional", "ser")]
    back = Report.from_tsv(Report(rows).to_tsv())
    for a, b in zip(rows, back.rows):
        assert a["variant"] == b["variant"]
        for k in ("dwi_nrmse", "md_nrmse", "fa_nrmse"):
            assert a[k] == b[k]
        assert np.isnan(b["fa_nrmse_wm"])
    assert back.to_tsv() == Report(rows).to_tsv()
    with pytest.raises(ValueError):
        Report.from_tsv("a\tb\n")


def test_evaluation_report_gold_scores_zero(rng):
    sc = scheme()
    t = random_tensors(rng, (4, 4, 2))
    truth = TensorField(tensor_components(t), np.ones((4, 4, 2)), np.zeros((4, 4, 2), bool))
    gold = synthesize(truth, sc)
    noisy = gold + 0.01 * rng.standard_normal(gold.shape)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = evaluation_report({"gold": gold, "noisy": noisy}, gold, sc, np.ones((4, 4, 2), bool))
    g, n = rep.row("gold"), rep.row("noisy")
    assert g["dwi_nrmse"] == 0 and g["md_nrmse"] == 0 and g["fa_nrmse"] == 0
    assert 0 < n["dwi_nrmse"] < 0.05 and n["md_nrmse"] > 0
    with pytest.raises(KeyError):
        rep.row("missing")
    with pytest.raises(ValueError):
        evaluation_report({"bad": gold[:, :2]}, gold, sc, np.ones((4, 4, 2), bool))
