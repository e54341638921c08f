"""Portable graymap/pixmap emitters and SRF profile plots."""
from __future__ import annotations

import numpy as np
from PIL import Image


def mosaic(vol, cols=None):
    """Tile the z slices of an (x, y, z[, c]) volume into one 2-D image, x down, y across."""
    vol = np.asarray(vol)
    if vol.ndim == 2:
        return vol
    nx, ny, nz = vol.shape[:3]
    cols = cols or int(np.ceil(np.sqrt(nz)))
    rows = int(np.ceil(nz / cols))
    out = np.zeros((rows * nx, cols * ny) + vol.shape[3:], dtype=vol.dtype)
    for z in range(nz):
        r, c = divmod(z, cols)
        out[r * nx:(r + 1) * nx, c * ny:(c + 1) * ny] = vol[:, :, z]
    return out


def to_uint8(x, vmin=0.0, vmax=1.0):
    x = (np.asarray(x, dtype=float) - vmin) / (vmax - vmin)
    return np.round(np.clip(np.nan_to_num(x), 0.0, 1.0) * 255).astype(np.uint8)


def save_gray(path, vol, vmin=0.0, vmax=1.0):
    Image.fromarray(to_uint8(mosaic(vol), vmin, vmax), mode="L").save(path, format="PPM")


def save_rgb(path, vol):
    Image.fromarray(to_uint8(mosaic(vol)), mode="RGB").save(path, format="PPM")


def save_srf_profiles(path, srfs: dict):
    """Three panels of 1-D cuts through each SRF peak, normalized to unit peak."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(10, 3), sharey=True)
    for name, srf in srfs.items():
        peak = srf.peak
        top = float(srf.data[peak])
        for a, (ax, label, val) in enumerate(zip(axes, ("x", "y", "z"), srf.profiles())):
            pos = (np.arange(val.size) - peak[a]) * srf.voxel_size[a] / srf.upsample
            ax.plot(pos, val / top, label=name)
            ax.set_xlabel(f"{label} (mm)")
    axes[0].set_ylabel("normalized response")
    for ax in axes:
        ax.axhline(0.5, color="0.6", lw=0.8, ls="--")
    axes[-1].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
