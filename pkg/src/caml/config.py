"""Training configuration and its ``key = value`` text format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    manifest: str = ""
    crop_dims: tuple = (16, 16, 16)
    batch_size: int = 4
    iterations: int = 800
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta_c: float = 1.0
    beta_o: float = 0.1
    bank_slots: int = 64
    top_i: int = 64
    proto_j: int = 32
    temperature: float = 10.0
    proj_dim: int = 16
    n_levels: int = 3
    base_channels: int = 8
    heads: int = 4
    mlp_ratio: float = 2.0
    n_classes: int = 2
    seed: int = 0
    eval_every: int = 0
    enable_cma: bool = True
    enable_occ: bool = True
    supervised_only: bool = False
    window: tuple = (16, 16, 16)
    stride: tuple = (8, 8, 8)

    def validate(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if len(self.crop_dims) != 3 or min(self.crop_dims) < 1:
            raise ConfigError("crop_dims must be three positive extents")
        n_vox = self.crop_dims[0] * self.crop_dims[1] * self.crop_dims[2]
        if self.top_i * self.n_classes > n_vox:
            raise ConfigError("top_i * n_classes exceeds the crop voxel count")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _parse(kind, raw, key):
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is tuple:
            return tuple(int(v) for v in raw.replace("x", ",").split(","))
        return kind(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _kinds(cls):
    return {f.name: type(f.default) for f in dataclasses.fields(cls)}


def parse_config(text, cls=TrainConfig, base=None):
    """Parse ``key = value`` lines (``#`` comments) into ``cls``."""
    kinds = _kinds(cls)
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if key not in kinds:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _parse(kinds[key], value.strip(), key)
    cfg = dataclasses.replace(base, **values) if base is not None else cls(**values)
    return cfg


def load_config(path, cls=TrainConfig):
    cfg = parse_config(Path(path).read_text(), cls)
    if hasattr(cfg, "manifest") and cfg.manifest and not Path(cfg.manifest).is_absolute():
        cfg.manifest = str((Path(path).parent / cfg.manifest).resolve())
    return cfg


def format_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentConfig:
    """A training config plus output placement and the seeds to repeat over."""

    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"
    run_name: str = "caml"
    seeds: tuple = (0,)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
