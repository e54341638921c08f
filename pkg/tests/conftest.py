import logging

import numpy as np
import pytest

from gslider_ser.core_model import EncodingModel, GridDims, PartialFourierModel


@pytest.fixture(autouse=True)
def _quiet_cg():
    logging.getLogger("gslider_ser.linalg").setLevel(logging.ERROR)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small():
    """Tiny grid: 8x8 in-plane, 2 slabs of 5, 3 volumes."""
    dims = GridDims(8, 8, 2, 3)
    return dims, EncodingModel(), PartialFourierModel(8, 0.75)


def rand_image(rng, dims):
    return rng.standard_normal(dims.image_shape)


def rand_slab(rng, dims):
    return rng.standard_normal(dims.slab_shape) + 1j * rng.standard_normal(dims.slab_shape)


def rand_phase(rng, dims, scale=1.0):
    return scale * rng.standard_normal(dims.slab_shape)


def rel(a, b):
    return float(np.linalg.norm(np.ravel(a - b)) / max(np.linalg.norm(np.ravel(b)), 1e-300))


def centered_dft(n):
    """Unitary DFT with the zero frequency and zero position at index n // 2."""
    k = np.arange(n) - n // 2
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def dense_forward(dims, enc, pf, p):
    """Materialized G diag(e^{ip}) A as a (slab voxels) x (image voxels) complex matrix."""
    nd, n1, n2, n3 = dims.image_shape
    ns, k = dims.ns, dims.k_enc
    img_index = np.arange(nd * n1 * n2 * n3).reshape(nd, n1, n2, n3)
    slab_index = np.arange(ns * k * nd * n1 * n2).reshape(ns, k, nd, n1, n2)
    a = np.zeros((slab_index.size, img_index.size))
    for s in range(ns):
        for e in range(k):
            for j in range(k):
                a[slab_index[s, e].ravel(), img_index[..., s * k + j].ravel()] = enc.profile_matrix[e, j]
    f = centered_dft(n2)
    g1 = f.conj().T @ np.diag(pf.line_mask.astype(float)) @ f
    g = np.kron(np.eye(ns * k * nd * n1), g1)
    return g @ np.diag(np.exp(1j * p.ravel())) @ a
