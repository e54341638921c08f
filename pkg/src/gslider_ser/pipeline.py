"""Pipeline stages.  Each stage reads its inputs from containers in the output
directory and writes its outputs there, so any stage can be rerun alone."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import warnings

import numpy as np
from threadpoolctl import threadpool_limits

from . import characterize as ch
from . import conventional, lowrank, phantom, ser
from .config import RunConfig
from .container import Volume, read_container, write_container
from .dti_metrics import DiffusionScheme, Report, color_fa, evaluation_report, fa, fit_dti, md
from .images import save_gray, save_rgb, save_srf_profiles

log = logging.getLogger(__name__)

IMAGE_AXES = ("dwi", "x", "y", "z")
SLAB_AXES = ("slab", "encoding", "dwi", "x", "y")
MAP_AXES = ("x", "y", "z")
VARIANTS = ("conventional", "ser", "mppca", "lpca", "gpca")


class StageError(RuntimeError):
    def __init__(self, stage, msg):
        super().__init__(f"stage {stage}: {msg}")
        self.stage = stage


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """Bookkeeping shared by all stages: input lookup, provenance, writing."""

    def __init__(self, name, cfg: RunConfig):
        self.name, self.cfg = name, cfg
        self.out = cfg.output_dir
        self.inputs = {}

    def path(self, fname):
        return os.path.join(self.out, fname)

    def read(self, fname, **kw):
        p = self.cfg.inputs.get(fname.rsplit(".", 1)[0]) or self.path(fname)
        if not os.path.exists(p):
            raise StageError(self.name, f"input container not found: {p}")
        self.inputs[os.path.basename(p)] = _sha256(p)
        return read_container(p, **kw)

    def exists(self, fname):
        return os.path.exists(self.path(fname))

    def provenance(self, **extra):
        prov = {"command": self.name, "seed": self.cfg.seed, "params": self.cfg.to_dict(),
                "inputs": dict(sorted(self.inputs.items()))}
        prov.update(extra)
        return prov

    def write(self, fname, data, kind="image", axes=IMAGE_AXES, scheme=None, dtype=None, **extra):
        spec = self.cfg.phantom_spec()
        if dtype is None:
            wide = self.cfg.storage_dtype == "real64"
            dtype = ("complex128" if wide else "complex64") if np.iscomplexobj(data) else self.cfg.storage_dtype
        vol = Volume(data, kind=kind, axis_order=axes, voxel_size=spec.dims.voxel_size,
                     bvals=None if scheme is None else spec.bvals,
                     bvecs=None if scheme is None else spec.bvecs,
                     provenance=self.provenance(**extra))
        write_container(vol, self.path(fname), dtype)
        log.info("wrote container", extra={"stage": self.name, "file": fname})

    def write_text(self, fname, text):
        with open(self.path(fname), "w", newline="\n") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_simulate(st: Stage):
    cfg = st.cfg
    spec = cfg.phantom_spec()
    enc, pf = cfg.models()
    ds = phantom.simulate_dataset(spec, enc, pf, cfg.phantom.n_repetitions)
    st.write("truth.gsv", ds.truth, scheme=True)
    st.write("truth_phase.gsv", ds.truth_phase, kind="phase", axes=SLAB_AXES, dtype="real64")
    st.write("labels.gsv", ds.labels.astype(float), kind="map", axes=MAP_AXES)
    for r, b in enumerate(ds.repetitions):
        st.write(f"slab_rep{r}.gsv", b, kind="slab", axes=SLAB_AXES, scheme=True, repetition=r)


def _repetition_files(st):
    files = [f"slab_rep{r}.gsv" for r in range(st.cfg.phantom.n_repetitions)]
    return files


def stage_recon_gslider(st: Stage):
    enc, pf = st.cfg.models()
    recons = []
    for i, fname in enumerate(_repetition_files(st)):
        b = st.read(fname, expect_kind="slab").data.astype(complex)
        f, p = conventional.conventional_recon(b, enc, pf, st.cfg.tikhonov)
        recons.append(f)
        if i == 0:
            st.write("conventional_phase.gsv", p, kind="phase", axes=SLAB_AXES, dtype="real64")
            st.write("conventional.gsv", f, scheme=True)
    st.write("gold.gsv", conventional.average_repetitions(recons), scheme=True,
             repetitions=len(recons))


def stage_recon_ser(st: Stage):
    enc, pf = st.cfg.models()
    b = st.read("slab_rep0.gsv", expect_kind="slab").data.astype(complex)
    lines = []

    def on_iter(it, terms):
        rec = {"iter": it, "data": terms.data, "R": terms.phase, "J": terms.edge, "total": terms.total}
        lines.append(json.dumps(rec, sort_keys=True))
        log.info("ser objective", extra={"stage": st.name, **rec})

    res = ser.ser_reconstruct(b, enc, pf, st.cfg.ser, tik=st.cfg.tikhonov, log_callback=on_iter)
    solver = {"lambda1": res.state.lambda1, "lambda2": res.state.lambda2, "xi": res.state.xi,
              "outer_iterations": len(res.history) - 1}
    st.write("ser.gsv", res.f, scheme=True, solver=solver)
    st.write("ser_phase.gsv", res.p, kind="phase", axes=SLAB_AXES, dtype="real64", solver=solver)
    st.write_text("ser_history.jsonl", "\n".join(lines) + "\n")


def _denoise(st: Stage, kind):
    cfg = st.cfg
    x = st.read("conventional.gsv").data.astype(float)
    vs = cfg.phantom_spec().dims.voxel_size
    if kind == "mppca":
        out = lowrank.mppca_denoise(x, cfg.patch, vs, threads=cfg.threads)
    else:
        gold = st.read("gold.gsv").data.astype(float)
        out = lowrank.oracle_pca_denoise(x, gold, cfg.patch, vs, global_=(kind == "gpca"), threads=cfg.threads)
    st.write(f"{kind}.gsv", out, scheme=True)


def _scheme(cfg):
    spec = cfg.phantom_spec()
    return DiffusionScheme(spec.bvals, spec.bvecs)


def stage_dti_fit(st: Stage):
    scheme = _scheme(st.cfg)
    mask = st.read("labels.gsv").data > 0
    for name in ("gold",) + VARIANTS:
        if not st.exists(f"{name}.gsv"):
            continue
        st.inputs.clear()
        st.read("labels.gsv")
        img = st.read(f"{name}.gsv").data.astype(float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            t = fit_dti(img, scheme, mask)
        if t.clamped.any():
            log.warning("nonpositive signal clamped", extra={"stage": st.name, "variant": name,
                                                             "voxels": int(t.clamped.sum())})
        st.write(f"dti_{name}_md.gsv", md(t), kind="map", axes=MAP_AXES)
        st.write(f"dti_{name}_fa.gsv", fa(t), kind="map", axes=MAP_AXES)
        save_gray(st.path(f"dti_{name}_fa.pgm"), fa(t), vmax=1.0)
        save_gray(st.path(f"dti_{name}_md.pgm"), md(t), vmax=3e-3)
        save_rgb(st.path(f"dti_{name}_colorfa.ppm"), color_fa(t))


def stage_metrics(st: Stage):
    scheme = _scheme(st.cfg)
    gold = st.read("gold.gsv").data.astype(float)
    mask = st.read("labels.gsv").data > 0
    variants = {n: st.read(f"{n}.gsv").data.astype(float) for n in VARIANTS if st.exists(f"{n}.gsv")}
    if not variants:
        raise StageError(st.name, "no reconstructed variants found")
    rep = evaluation_report(variants, gold, scheme, mask)
    st.write_text("metrics.txt", rep.to_text())
    st.write_text("metrics.tsv", rep.to_tsv())
    return rep


def _ser_operator(st: Stage, enc, pf):
    """Rebuild the frozen SER operator from the stored image, phase and solver settings."""
    vol = st.read("ser.gsv")
    b = st.read("slab_rep0.gsv", expect_kind="slab").data.astype(complex)
    p = st.read("ser_phase.gsv").data.astype(float)
    solver = vol.provenance["solver"]
    _, scales = ser.normalize_dwi_medians(b)
    fn = vol.data.astype(float) * scales[:, None, None, None]
    return ch.SerLinearization(enc, pf, p, solver["lambda2"], ser.irls_weights(fn, solver["xi"]))


def _target(cfg):
    d = cfg.phantom_spec().dims
    if cfg.characterize.target is not None:
        return tuple(int(v) for v in cfg.characterize.target)
    return (d.n1 // 2, d.n2 // 2, d.n3 // 2)


def stage_srf(st: Stage):
    cfg = st.cfg
    enc, pf = cfg.models()
    c = cfg.characterize
    vs = cfg.phantom_spec().dims.voxel_size
    p = st.read("conventional_phase.gsv").data.astype(float)
    ops = {"conventional": ch.ConventionalLinearization(enc, pf, p, cfg.tikhonov.lam),
           "ser": _ser_operator(st, enc, pf)}
    summary = {"target": list(_target(cfg)), "dwi": c.dwi, "upsample": c.upsample}
    profiles = {}
    for name, opr in ops.items():
        srf = ch.compute_srf(opr, _target(cfg), c.dwi, c.upsample, c.radius, vs)
        summary[f"fvhm_{name}_mm3"] = ch.fvhm(srf)
        summary[f"fvhm_{name}_voxels"] = ch.fvhm(srf) / float(np.prod(vs))
        summary[f"asymmetry_{name}"] = ch.rf_asymmetry(srf)
        profiles[name] = srf
        st.write(f"srf_{name}.gsv", srf.data, kind="map", axes=MAP_AXES, dtype="real64")
    summary["fvhm_growth"] = summary["fvhm_ser_mm3"] / summary["fvhm_conventional_mm3"]
    st.write_text("srf.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    save_srf_profiles(st.path("srf_profiles.png"), profiles)
    return summary


def stage_noisemap(st: Stage):
    cfg = st.cfg
    enc, pf = cfg.models()
    c = cfg.characterize
    sigma = cfg.phantom.noise_sigma or 1.0
    p = st.read("conventional_phase.gsv").data.astype(float)
    conv_op = ch.ConventionalLinearization(enc, pf, p, cfg.tikhonov.lam)
    ser_op = _ser_operator(st, enc, pf)
    vc = ch.noise_variance_map(conv_op, sigma, c.n_trials, cfg.seed, c.dwi, threads=cfg.threads)
    vser = ch.noise_variance_map(ser_op, sigma, c.n_trials, cfg.seed, c.dwi, threads=cfg.threads)
    ratio, flagged = ch.variance_reduction_map(vc, vser)
    st.write("noise_var_conventional.gsv", vc.data, kind="map", axes=MAP_AXES)
    st.write("noise_var_ser.gsv", vser.data, kind="map", axes=MAP_AXES)
    st.write("noise_reduction.gsv", ratio, kind="map", axes=MAP_AXES)
    save_gray(st.path("noise_reduction.pgm"), ratio, vmax=max(float(np.max(ratio)), 1e-12))
    mask = st.read("labels.gsv").data > 0
    st.write_text("noise_reduction.json", json.dumps(
        {"median_in_mask": float(np.median(ratio[mask])), "flagged_voxels": int(np.sum(flagged))},
        sort_keys=True) + "\n")


STAGES = {
    "simulate": stage_simulate,
    "recon-gslider": stage_recon_gslider,
    "recon-ser": stage_recon_ser,
    "denoise-mppca": lambda st: _denoise(st, "mppca"),
    "denoise-lpca": lambda st: _denoise(st, "lpca"),
    "denoise-gpca": lambda st: _denoise(st, "gpca"),
    "dti-fit": stage_dti_fit,
    "metrics": stage_metrics,
    "srf": stage_srf,
    "noisemap": stage_noisemap,
}


def run_stage(name, cfg: RunConfig):
    if name not in STAGES:
        raise StageError(name, "unknown stage")
    os.makedirs(cfg.output_dir, exist_ok=True)
    t0 = time.perf_counter()
    log.info("stage start", extra={"stage": name})
    # BLAS reductions are pinned to one thread so results never depend on --threads
    with threadpool_limits(limits=1):
        result = STAGES[name](Stage(name, cfg))
    log.info("stage done", extra={"stage": name, "seconds": round(time.perf_counter() - t0, 3)})
    return result


def run_pipeline(cfg: RunConfig, stages=None) -> int:
    """Run stages in order; returns 0 on success, 1 after logging an error record."""
    stages = list(stages or cfg.stages)
    for name in stages:
        try:
            run_stage(name, cfg)
        except Exception as e:  # noqa: BLE001 - reported as a machine-readable record
            log.error("stage failed", extra={"stage": name, "error": type(e).__name__, "detail": str(e)})
            return 1
    return 0


def load_report(cfg: RunConfig) -> Report:
    with open(os.path.join(cfg.output_dir, "metrics.tsv")) as fh:
        return Report.from_tsv(fh.read())
