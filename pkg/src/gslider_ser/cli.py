"""Command-line entry point: ``gslider-ser <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .config import ConfigError, RunConfig, load_config, override
from .pipeline import run_pipeline

_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonLinesFormatter(logging.Formatter):
    def format(self, record):
        rec = {"time": round(record.created, 3), "level": record.levelname.lower(),
               "logger": record.name, "msg": record.getMessage()}
        for k, v in record.__dict__.items():
            if k not in _RESERVED:
                rec[k] = v
        if record.exc_info:
            rec["exception"] = self.formatException(record.exc_info)
        return json.dumps(rec, sort_keys=True, default=str)


def setup_logging(level="info", log_file=None):
    handler = logging.FileHandler(log_file) if log_file else logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLinesFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    # CG iteration-limit notices are expected inside IRLS and only clutter the log
    logging.getLogger("gslider_ser.linalg").setLevel(logging.ERROR)


# flag -> dotted config key; one table per subcommand
PHANTOM_FLAGS = {
    "n1": ("phantom.n1", int), "n2": ("phantom.n2", int), "ns": ("phantom.ns", int),
    "k_enc": ("phantom.k_enc", int), "n_b0": ("phantom.n_b0", int), "n_dirs": ("phantom.n_dirs", int),
    "b_value": ("phantom.b_value", float), "noise_sigma": ("phantom.noise_sigma", float),
    "noise_profile": ("phantom.noise_profile", str), "n_repetitions": ("phantom.n_repetitions", int),
    "pf_fraction": ("encoding.pf_fraction", float),
}
TIKHONOV_FLAGS = {"tikhonov_lam": ("tikhonov.lam", float)}
SER_FLAGS = {
    "lambda1": ("ser.lambda1", float), "lambda2": ("ser.lambda2", float), "xi": ("ser.xi", float),
    "xi_quantile": ("ser.xi_quantile", float), "outer_iters": ("ser.outer_iters", int),
    "irls_iters": ("ser.irls_iters", int), "cg_iters": ("ser.cg_iters", int),
    "ncg_iters": ("ser.ncg_iters", int), "cg_tol": ("ser.cg_tol", float),
    "objective_tol": ("ser.objective_tol", float),
}
PATCH_FLAGS = {"patch_edge_mm": ("patch.patch_edge_mm", float), "stride": ("patch.stride", int)}
CHAR_FLAGS = {"dwi": ("characterize.dwi", int), "upsample": ("characterize.upsample", int),
              "radius": ("characterize.radius", int), "n_trials": ("characterize.n_trials", int)}

SUBCOMMANDS = {
    "simulate": ("write truth, labels and slab-encoded repetitions", [PHANTOM_FLAGS]),
    "recon-gslider": ("Tikhonov reconstruction of every repetition plus the averaged gold standard",
                      [TIKHONOV_FLAGS]),
    "recon-ser": ("joint magnitude/phase reconstruction of repetition 0", [SER_FLAGS, TIKHONOV_FLAGS]),
    "denoise-mppca": ("Marchenko-Pastur PCA denoising of the conventional image", [PATCH_FLAGS]),
    "denoise-lpca": ("patchwise oracle-rank PCA (needs --gold)", [PATCH_FLAGS]),
    "denoise-gpca": ("whole-volume oracle-rank PCA (needs --gold)", [PATCH_FLAGS]),
    "dti-fit": ("tensor fits, MD/FA containers and pixmaps", []),
    "metrics": ("NRMSE table of every variant against the gold standard", []),
    "srf": ("spatial response functions, FVHM and profile plots", [CHAR_FLAGS]),
    "noisemap": ("Monte Carlo noise variance maps and their ratio", [CHAR_FLAGS]),
    "pipeline": ("run several stages in order", [PHANTOM_FLAGS, TIKHONOV_FLAGS, SER_FLAGS, PATCH_FLAGS,
                                                 CHAR_FLAGS]),
}


def build_parser():
    ap = argparse.ArgumentParser(prog="gslider-ser", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (help_text, tables) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--out-dir", help="output directory (config: output_dir)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
        p.add_argument("--storage-dtype", choices=["real32", "real64"])
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. ser.lambda2=0.5 (YAML value syntax)")
        p.add_argument("--log-file")
        p.add_argument("--log-level", default="info")
        seen = set()
        for table in tables:
            for flag, (_, typ) in table.items():
                if flag not in seen:
                    seen.add(flag)
                    p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
        if name in ("denoise-lpca", "denoise-gpca"):
            p.add_argument("--gold", required=True, help="gold-standard image container")
        if name.startswith("denoise-"):
            p.add_argument("--input", help="image container to process (default: conventional.gsv)")
        if name == "srf":
            p.add_argument("--target", type=int, nargs=3, metavar=("X", "Y", "Z"))
        if name == "pipeline":
            p.add_argument("--stages", help="comma-separated stage list (default from config)")
    return ap


def config_from_args(args) -> RunConfig:
    import yaml
    cfg = load_config(args.config) if args.config else RunConfig()
    sets = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = yaml.safe_load(v)
    for table in SUBCOMMANDS[args.command][1]:
        for flag, (key, _) in table.items():
            if getattr(args, flag, None) is not None:
                sets[key] = getattr(args, flag)
    for attr, key in (("out_dir", "output_dir"), ("seed", "seed"), ("threads", "threads"),
                      ("storage_dtype", "storage_dtype")):
        if getattr(args, attr, None) is not None:
            sets[key] = getattr(args, attr)
    if getattr(args, "target", None):
        sets["characterize.target"] = list(args.target)
    if getattr(args, "stages", None):
        sets["stages"] = args.stages.split(",")
    cfg = override(cfg, sets)
    inputs = dict(cfg.inputs)
    if getattr(args, "gold", None):
        inputs["gold"] = args.gold
    if getattr(args, "input", None):
        inputs["conventional"] = args.input
    if inputs != cfg.inputs:
        cfg = override(cfg, {"inputs": inputs})
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    log = logging.getLogger("gslider_ser.cli")
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError) as e:
        log.error("invalid configuration", extra={"error": type(e).__name__, "detail": str(e)})
        return 2
    stages = cfg.stages if args.command == "pipeline" else [args.command]
    t0 = time.perf_counter()
    status = run_pipeline(cfg, stages)
    log.info("finished", extra={"status": status, "seconds": round(time.perf_counter() - t0, 3)})
    return status


if __name__ == "__main__":
    sys.exit(main())
