"""Run configuration: TOML file, ``--set`` overrides and environment overrides.

Keys are dotted (``diffusion.T``, ``train.lr``, ``ablation.no_cyclic``).
Environment variables prefixed ``VESSELDIFF__`` override file values, with
``__`` standing for the dot: ``VESSELDIFF__TRAIN__BATCH_SIZE=8``.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

ENV_PREFIX = "VESSELDIFF__"


class ConfigError(ValueError):
    pass


@dataclass
class DiffusionConfig:
    T: int = 2000
    beta_start: float = 1e-6
    beta_end: float = 1e-2
    T_a: int = 200


@dataclass
class LossConfig:
    alpha: float = 0.2
    beta: float = 5.0


@dataclass
class CycleConfig:
    # step used when the synthetic angiogram re-enters the segmentation path;
    # negative means "draw uniformly from [0, T_a]"
    reentry_t: int = -1


@dataclass
class TrainSection:
    lr: float = 5e-6
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 150
    batch_size: int = 4
    max_steps: int = 0  # 0: no cap beyond epochs
    augment: bool = True
    log_every: int = 1
    validate_every: int = 1  # epochs
    selection_metric: str = "dice"


@dataclass
class ModelSection:
    preset: str = "full"  # full | tiny | micro
    width: int = 16  # tiny preset only
    levels: int = 3  # tiny preset only


@dataclass
class AblationConfig:
    no_diffusion_module: bool = False
    no_sspade: bool = False
    no_cyclic: bool = False
    ce_for_l1: bool = False
    drop_ds: bool = False
    drop_da: bool = False
    autoencoder_latent: bool = False
    no_background_inputs: bool = False

    def validate(self):
        if self.no_diffusion_module and self.autoencoder_latent:
            raise ConfigError("ablation.no_diffusion_module and ablation.autoencoder_latent are exclusive")
        if self.drop_ds and self.drop_da:
            raise ConfigError("cannot drop both discriminators")
        if self.no_cyclic and self.ce_for_l1:
            raise ConfigError("ablation.ce_for_l1 has no effect with ablation.no_cyclic")


@dataclass
class DataSection:
    root: str = ""
    size: int = 256
    eval_size: int = 0  # 0: same as size
    retinal: bool = False


@dataclass
class EvalSection:
    threshold: float = 0.5
    t_a: int = 0
    sigmas: list = field(default_factory=lambda: [0, 10, 25, 50])
    noise_seed: int = 1234


@dataclass
class FractalSection:
    canvas_size: int = 512
    thickness_min: float = 15.0
    thickness_max: float = 25.0
    branch_depth: int = 4
    length_decay: float = 0.7
    root_length: float = 0.3


@dataclass
class TrainConfig:
    seed: int = 0
    out: str = "runs/default"
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    cycle: CycleConfig = field(default_factory=CycleConfig)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    fractal: FractalSection = field(default_factory=FractalSection)

    def validate(self) -> "TrainConfig":
        self.ablation.validate()
        if self.train.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.train.batch_size <= 0:
            raise ConfigError("train.batch_size must be positive")
        if not 0 < self.diffusion.T_a < self.diffusion.T:
            raise ConfigError("need 0 < diffusion.T_a < diffusion.T")
        if self.loss.alpha < 0 or self.loss.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 < self.eval.threshold < 1:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def smoke_config(**overrides) -> TrainConfig:
    """Desk-scale settings used by the smoke corpus and tests."""
    cfg = TrainConfig()
    cfg.model.preset = "tiny"
    cfg.model.width = 8
    cfg.train.lr = 5e-4
    cfg.train.batch_size = 4
    cfg.train.epochs = 10_000
    cfg.train.max_steps = 2000
    cfg.train.validate_every = 0
    cfg.data.size = 64
    return apply_overrides(cfg, overrides)


def _coerce(current, value, key):
    if isinstance(current, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: cannot read {value!r} as a boolean")
        return bool(value)
    try:
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{key}: expected an integer, got {value}")
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            if isinstance(value, str):
                return [float(v) if "." in v else int(v) for v in value.split(",") if v.strip()]
            return list(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return str(value)


def set_key(cfg: TrainConfig, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    obj = cfg
    for i, part in enumerate(parts):
        names = {f.name: f.name for f in dataclasses.fields(obj)} if dataclasses.is_dataclass(obj) else {}
        names.update({n.lower(): n for n in list(names)})
        if part not in names and part.lower() not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        part = names.get(part, names.get(part.lower()))
        if i == len(parts) - 1:
            current = getattr(obj, part)
            if dataclasses.is_dataclass(current):
                raise ConfigError(f"{dotted!r} is a section, not a key")
            setattr(obj, part, _coerce(current, value, dotted))
        else:
            obj = getattr(obj, part)


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    for key, value in _flatten(overrides).items():
        set_key(cfg, key, value)
    return cfg


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            out[".".join(name[len(ENV_PREFIX):].lower().split("__"))] = value
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                environ=None, base: TrainConfig | None = None) -> TrainConfig:
    """Resolve file values, then environment, then explicit overrides."""
    cfg = base if base is not None else TrainConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                tree = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        apply_overrides(cfg, tree)
    apply_overrides(cfg, env_overrides(environ))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def from_dict(tree: dict) -> TrainConfig:
    return apply_overrides(TrainConfig(), tree)


def dump_toml(cfg: TrainConfig) -> str:
    lines = []
    tree = cfg.to_dict()
    for k, v in tree.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {_toml_value(v)}")
    for section, values in tree.items():
        if isinstance(values, dict):
            lines.append(f"\n[{section}]")
            for k, v in values.items():
                lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
