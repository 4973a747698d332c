"""Pipeline configuration: a flat, diffable key = value text format.

Every key mirrors a PipelineConfig field; '#' starts a comment; CLI flags
override file values. Unknown keys are configuration errors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class PipelineConfig:
    data: str = ""
    out: str = ""
    seed: int = 0
    preset: str = ""  # when set, the dataset is generated here first
    frames: int = 10
    width: int = 128
    height: int = 128
    noise_depth: float = 0.005
    noise_color: float = 0.005

    # stage 1 (mesh reconstruction)
    grid_res: int = 64
    sdf_iters: int = 1500
    batch_rays: int = 1024
    samples_per_ray: int = 32
    lr_grid: float = 1e-2
    alpha1: float = 0.1
    alpha2: float = 0.01

    # stage 2 (mesh-restricted splatting)
    surface_iters: int = 2000
    beta1: float = 0.5
    beta2: float = 0.1
    beta3: float = 0.05
    gamma1: float = 1.0
    gamma2: float = 0.5

    # stage 3 (deformation)
    deform_iters: int = 300
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 0.05
    lambda4: float = 0.02
    r: int = 8
    rho: float = 0.0  # 0 = auto: 10x the median mesh edge length

    # tracking
    track_min_len: int = 3
    track_max_disp: float = 20.0
    max_keypoints: int = 200
    tracks_file: str = ""  # pre-computed tracks to ingest instead of detecting

    # ablations
    no_surface_aware: bool = False
    no_arap: bool = False
    no_global: bool = False
    free_kernels: int = 6000  # kernel count for the no-surface-aware ablation

    def validate(self) -> None:
        for name in ("alpha1", "alpha2", "beta1", "beta2", "beta3",
                     "lambda1", "lambda2", "lambda3", "lambda4", "gamma1", "gamma2", "rho"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.data:
            raise ConfigError("config requires a dataset directory ('data')")
        if not self.out:
            raise ConfigError("config requires an output directory ('out')")
        if self.r < 1:
            raise ConfigError("r must be >= 1")
        if self.grid_res < 2:
            raise ConfigError("grid_res must be >= 2")


_FIELDS = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got '{raw}'")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a {kind}, got '{raw}'") from None
    return raw


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    cfg = PipelineConfig()
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{line_no}: unknown key '{key}'")
            setattr(cfg, key, _parse_value(key, raw))
    return cfg


def save_config(path, cfg: PipelineConfig) -> None:
    with open(path, "w") as fh:
        for f in fields(PipelineConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")
