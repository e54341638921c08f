"""Run configuration loaded from YAML or JSON; unknown keys are rejected."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
import json
import os
import typing

import numpy as np
import yaml

from .conventional import TikhonovParams
from .core_model import EncodingModel, GridDims, PartialFourierModel, default_profile_matrix
from .lowrank import PatchConfig
from .phantom import PhaseSpec, PhantomSpec, default_scheme, default_spec
from .ser import SerParams


class ConfigError(ValueError):
    pass


@dataclass
class PhantomSection:
    n1: int = 32
    n2: int = 32
    ns: int = 4
    k_enc: int = 5
    n_b0: int = 1
    n_dirs: int = 12
    voxel_size: list = field(default_factory=lambda: [1.25, 1.25, 1.25])
    b_value: float = 1500.0
    noise_sigma: float = 0.1
    noise_profile: str = "uniform"
    phase_scale: float = 8.0
    phase_amplitude: float = 1.0
    n_repetitions: int = 3

    def build(self, seed) -> PhantomSpec:
        if self.noise_profile not in ("uniform", "radial"):
            raise ConfigError(f"phantom.noise_profile must be 'uniform' or 'radial', got {self.noise_profile!r}")
        dims = GridDims(self.n1, self.n2, self.ns, self.n_b0 + self.n_dirs, self.k_enc, tuple(self.voxel_size))
        return default_spec(dims, bvecs=default_scheme(self.n_b0, self.n_dirs), b_value=self.b_value,
                            noise_sigma=self.noise_sigma, noise_profile=self.noise_profile,
                            phase=PhaseSpec(self.phase_scale, self.phase_amplitude), seed=seed)


@dataclass
class EncodingSection:
    profile_matrix: list | None = None     # None -> ones - 2 I of size k_enc
    pf_fraction: float = 0.75

    def build(self, k_enc, n_pe):
        m = default_profile_matrix(k_enc) if self.profile_matrix is None else np.asarray(self.profile_matrix, float)
        if m.shape != (k_enc, k_enc):
            raise ConfigError(f"encoding.profile_matrix must be {k_enc}x{k_enc}, got {m.shape}")
        return EncodingModel(m), PartialFourierModel(n_pe, self.pf_fraction)


@dataclass
class CharacterizeSection:
    dwi: int = 1
    upsample: int = 13
    radius: int = 4
    n_trials: int = 512
    target: list | None = None     # voxel (x, y, z); None -> centre of the volume


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    output_dir: str = "out"
    storage_dtype: str = "real32"
    stages: list = field(default_factory=lambda: list(DEFAULT_STAGES))
    inputs: dict = field(default_factory=dict)      # optional pre-existing containers by name
    phantom: PhantomSection = field(default_factory=PhantomSection)
    encoding: EncodingSection = field(default_factory=EncodingSection)
    tikhonov: TikhonovParams = field(default_factory=TikhonovParams)
    ser: SerParams = field(default_factory=SerParams)
    patch: PatchConfig = field(default_factory=PatchConfig)
    characterize: CharacterizeSection = field(default_factory=CharacterizeSection)

    def phantom_spec(self) -> PhantomSpec:
        return self.phantom.build(self.seed)

    def models(self):
        return self.encoding.build(self.phantom.k_enc, self.phantom.n2)

    def validate(self, base_dir="."):
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.storage_dtype not in ("real32", "real64"):
            raise ConfigError("storage_dtype must be real32 or real64")
        unknown = [s for s in self.stages if s not in ALL_STAGES]
        if unknown:
            raise ConfigError(f"unknown stage(s) {unknown}; choose from {list(ALL_STAGES)}")
        for name, path in self.inputs.items():
            full = os.path.join(base_dir, path)
            if not os.path.exists(full):
                raise ConfigError(f"input {name!r} not found: {full}")
        self.phantom_spec()
        self.models()
        return self

    def to_dict(self, include_runtime=False):
        """Plain dict; ``threads`` and ``output_dir`` are left out unless asked since
        neither changes results."""
        d = _plain(asdict(self))
        if not include_runtime:
            d.pop("threads")
            d.pop("output_dir")
        return d


DEFAULT_STAGES = ("simulate", "recon-gslider", "recon-ser", "denoise-mppca", "denoise-lpca",
                  "denoise-gpca", "dti-fit", "metrics")
ALL_STAGES = DEFAULT_STAGES + ("srf", "noisemap")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    extra = sorted(set(data) - set(known))
    if extra:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {extra}")
    kw = {}
    for name, value in data.items():
        t = hints.get(name)
        if isinstance(t, type) and is_dataclass(t):
            kw[name] = _build(t, value, f"{where}.{name}" if where else name)
        elif name == "stages" and isinstance(value, str):
            kw[name] = value.split(",")
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where or 'config'}: {e}") from None


def config_from_dict(data) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    return config_from_dict(data)


def override(cfg: RunConfig, dotted: dict) -> RunConfig:
    """Apply ``{"ser.lambda2": 0.5, "seed": 3}`` style overrides, validating keys."""
    d = cfg.to_dict(include_runtime=True)
    for key, value in dotted.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(d)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(include_runtime=True), sort_keys=True)


__all__ = ["ConfigError", "RunConfig", "load_config", "config_from_dict", "override", "dump_config",
           "DEFAULT_STAGES", "ALL_STAGES"]
