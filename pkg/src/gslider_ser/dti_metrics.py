"""Error metrics, log-linear DTI fitting and per-variant evaluation reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass
import io
import warnings

import numpy as np

# tensor component order used everywhere: xx, yy, zz, xy, xz, yz
_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class DiffusionScheme:
    bvals: np.ndarray      # (nd,) s/mm^2
    bvecs: np.ndarray      # (nd, 3)

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=float)
        bvecs = np.asarray(self.bvecs, dtype=float)
        if bvecs.shape != (bvals.size, 3):
            raise ValueError("bvecs must be (nd, 3) matching bvals")
        w = bvals > 0
        if not np.allclose(np.linalg.norm(bvecs[w], axis=1), 1.0, atol=1e-6):
            raise ValueError("weighted directions must be unit norm")
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    @property
    def b0_indices(self):
        return np.flatnonzero(self.bvals == 0)

    def design_matrix(self):
        """Rows [1, -b g_i g_j (x2 off-diagonal)] for ln S = ln S0 - b g^T D g."""
        g, b = self.bvecs, self.bvals
        cols = [np.ones_like(b)]
        for i, j in _PAIRS:
            cols.append(-b * g[:, i] * g[:, j] * (1.0 if i == j else 2.0))
        return np.stack(cols, axis=1)


@dataclass
class TensorField:
    components: np.ndarray     # (..., 6) in mm^2/s, order xx yy zz xy xz yz
    s0: np.ndarray             # (...)
    clamped: np.ndarray        # (...) bool: nonpositive signals were clamped

    def matrices(self):
        c = self.components
        t = np.empty(c.shape[:-1] + (3, 3))
        for k, (i, j) in enumerate(_PAIRS):
            t[..., i, j] = c[..., k]
            t[..., j, i] = c[..., k]
        return t

    def eig(self):
        return np.linalg.eigh(self.matrices())


def tensor_components(t):
    t = np.asarray(t, dtype=float)
    return np.stack([t[..., i, j] for i, j in _PAIRS], axis=-1)


def nrmse(x, gold, mask=None):
    """||x - gold|| / ||gold|| over the masked voxels (mask over trailing spatial axes)."""
    x = np.asarray(x, dtype=float)
    gold = np.asarray(gold, dtype=float)
    if x.shape != gold.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {gold.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty mask")
        x = x[..., mask] if mask.shape != x.shape else x[mask]
        gold = gold[..., mask] if mask.shape != gold.shape else gold[mask]
    den = np.linalg.norm(gold)
    if den == 0:
        raise ValueError("gold standard has zero norm on the mask")
    return float(np.linalg.norm(x - gold) / den)


def fit_dti(dwis, scheme: DiffusionScheme, mask=None, eps=1e-6, weighted=False) -> TensorField:
    """Log-linear least-squares tensor fit per voxel.

    ``dwis`` has the DWI axis first.  Signals <= eps are clamped to eps and
    flagged.  ``weighted`` uses S^2 weights from a first unweighted pass.
    """
    dwis = np.asarray(dwis, dtype=float)
    if dwis.shape[0] != scheme.bvals.size:
        raise ValueError("number of volumes does not match the scheme")
    x = scheme.design_matrix()
    if np.linalg.matrix_rank(x) < 7:
        raise np.linalg.LinAlgError("diffusion design is rank deficient (collinear or too few directions)")
    spatial = dwis.shape[1:]
    sig = dwis.reshape(dwis.shape[0], -1)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
    else:
        mask = np.ones(sig.shape[1], dtype=bool)
    clamped = np.any(sig <= eps, axis=0) & mask
    y = np.log(np.maximum(sig[:, mask], eps))
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    if weighted:
        w = np.exp(x @ coef) ** 2
        for v in range(y.shape[1]):
            xw = x * w[:, v:v + 1]
            coef[:, v] = np.linalg.solve(x.T @ xw, xw.T @ y[:, v])
    comps = np.zeros((sig.shape[1], 6))
    s0 = np.zeros(sig.shape[1])
    comps[mask] = coef[1:].T
    s0[mask] = np.exp(coef[0])
    if np.any(clamped):
        warnings.warn(f"{int(clamped.sum())} voxel(s) had nonpositive signal; clamped to {eps}", RuntimeWarning)
    return TensorField(comps.reshape(spatial + (6,)), s0.reshape(spatial), clamped.reshape(spatial))


def synthesize(tensors: TensorField, scheme: DiffusionScheme):
    """S0 exp(-b g^T D g) for every volume; DWI axis first."""
    adc = np.einsum("...k,qk->q...", tensors.components, scheme.design_matrix()[:, 1:] / np.where(
        scheme.bvals > 0, -scheme.bvals, 1.0)[:, None])
    return tensors.s0[None] * np.exp(-scheme.bvals.reshape((-1,) + (1,) * tensors.s0.ndim) * adc)


def md(t):
    """Mean diffusivity from a tensor field, 3x3 matrices or component arrays."""
    return _trace(t) / 3.0


def _trace(t):
    if isinstance(t, TensorField):
        return t.components[..., :3].sum(axis=-1)
    t = np.asarray(t, dtype=float)
    if t.shape[-2:] == (3, 3):
        return np.trace(t, axis1=-2, axis2=-1)
    return t[..., :3].sum(axis=-1)


def _eigvals(t):
    if isinstance(t, TensorField):
        return t.eig()[0]
    t = np.asarray(t, dtype=float)
    if t.shape[-2:] != (3, 3):
        t = TensorField(t, np.zeros(t.shape[:-1]), np.zeros(t.shape[:-1], bool)).matrices()
    return np.linalg.eigh(t)[0]


def fa_from_eigenvalues(ev):
    ev = np.maximum(np.asarray(ev, dtype=float), 0.0)
    mean = ev.mean(axis=-1, keepdims=True)
    num = np.sqrt(np.sum((ev - mean) ** 2, axis=-1))
    den = np.sqrt(np.sum(ev ** 2, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(1.5) * num / den
    return np.clip(np.where(den > 0, fa, 0.0), 0.0, 1.0)


def fa(t):
    """Fractional anisotropy; negative eigenvalues clamped to zero, zero tensor -> 0."""
    return fa_from_eigenvalues(_eigvals(t))


def color_fa(t):
    """FA-weighted absolute principal eigenvector as RGB in [0, 1]."""
    if isinstance(t, TensorField):
        w, v = t.eig()
    else:
        t = np.asarray(t, dtype=float)
        if t.shape[-2:] != (3, 3):
            t = TensorField(t, np.zeros(t.shape[:-1]), np.zeros(t.shape[:-1], bool)).matrices()
        w, v = np.linalg.eigh(t)
    principal = np.abs(v[..., :, -1])
    return np.clip(fa_from_eigenvalues(w)[..., None] * principal, 0.0, 1.0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("variant", "dwi_nrmse", "md_nrmse", "fa_nrmse", "fa_nrmse_wm")


@dataclass
class Report:
    rows: list          # list of dicts keyed by REPORT_COLUMNS

    def row(self, name):
        for r in self.rows:
            if r["variant"] == name:
                return r
        raise KeyError(name)

    def to_text(self):
        head = f"{'variant':<14}" + "".join(f"{c:>14}" for c in REPORT_COLUMNS[1:])
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r['variant']:<14}" + "".join(f"{r[c]:>14.6f}" for c in REPORT_COLUMNS[1:]))
        return "\n".join(lines) + "\n"

    def to_tsv(self):
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r["variant"]] + [repr(float(r[c])) for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text):
        rd = csv.reader(io.StringIO(text), delimiter="\t")
        header = next(rd)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header {header}")
        rows = []
        for rec in rd:
            if rec:
                rows.append({"variant": rec[0], **{c: float(v) for c, v in zip(REPORT_COLUMNS[1:], rec[1:])}})
        return cls(rows)


def evaluation_report(variants: dict, gold, scheme: DiffusionScheme, brain_mask, fa_threshold=0.3) -> Report:
    """DWI, MD and FA NRMSE of each variant against the gold standard.

    ``fa_nrmse_wm`` restricts FA errors to voxels where the gold FA exceeds
    ``fa_threshold``.
    """
    brain_mask = np.asarray(brain_mask, dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        gt = fit_dti(gold, scheme, brain_mask)
    g_md, g_fa = md(gt), fa(gt)
    wm = brain_mask & (g_fa > fa_threshold)
    rows = []
    for name, img in variants.items():
        img = np.asarray(img)
        if img.shape != np.shape(gold):
            raise ValueError(f"variant {name!r} has shape {img.shape}, gold has {np.shape(gold)}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            t = fit_dti(img, scheme, brain_mask)
        v_fa = fa(t)
        rows.append({
            "variant": name,
            "dwi_nrmse": nrmse(img, gold, brain_mask),
            "md_nrmse": nrmse(md(t), g_md, brain_mask),
            "fa_nrmse": nrmse(v_fa, g_fa, brain_mask),
            "fa_nrmse_wm": nrmse(v_fa, g_fa, wm) if wm.any() else float("nan"),
        })
    return Report(rows)
