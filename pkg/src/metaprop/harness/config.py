"""Run configuration: strict section/key=value parsing and canonical text.

Unknown sections or keys are errors, never silent defaults.  A run's
effective configuration renders back to canonical text that is embedded
verbatim in its checkpoint and metrics header.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional


class ConfigError(Exception):
    pass


@dataclass
class RunSection:
    seed: int = 42
    out: str = "runs/default"
    iterations: int = 500
    eval_episodes: int = 200
    checkpoint_every: int = 0   # 0: final checkpoint only
    timing: bool = True         # off makes metrics files byte-reproducible


@dataclass
class TaskSection:
    family: str = "blobs"       # blobs | shapes | dataset
    n_way: int = 5
    k_shot: int = 1
    queries: int = 25
    dim: int = 16               # blobs
    classes: int = 25           # blobs / shapes
    separation: float = 6.0     # blobs
    noise: float = 1.0          # blobs
    data_seed: int = 99         # family seed; independent of the run seed
    image_size: int = 16        # shapes
    root: str = ""              # dataset


@dataclass
class ModelSection:
    backbone: str = "mlp"       # mlp | conv4
    hidden: int = 32            # mlp hidden width
    depth: int = 2              # mlp trainable layers
    channels: int = 32          # conv4 channel width
    gcn_layers: int = 2
    gcn_hidden: int = 16
    modulator_hidden: int = 32
    alpha_init: float = 0.5
    knn_k: int = 8
    scale_init: str = "auto"    # auto: probe-episode calibration, or a float


@dataclass
class AdaptationSection:
    inner_steps: int = 5
    inner_lr: float = 0.1
    outer_lr: float = 3e-3
    alpha_lr_scale: float = 0.1
    meta_batch: int = 4
    prop_loss_weight: float = 1.0
    second_order: bool = True
    modulation: str = "on"      # on | ones | off
    pseudo_labels: bool = True


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)

    def to_text(self) -> str:
        out = io.StringIO()
        for section_name in _SECTIONS:
            section = getattr(self, section_name)
            out.write(f"[{section_name}]\n")
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, bool):
                    value = "on" if value else "off"
                out.write(f"{f.name} = {value}\n")
            out.write("\n")
        return out.getvalue()

    def validate(self) -> "RunConfig":
        t = self.task
        if t.family not in ("blobs", "shapes", "dataset"):
            raise ConfigError(f"unknown task family {t.family!r}")
        if t.family == "dataset" and not t.root:
            raise ConfigError("task.root is required when family = dataset")
        if t.queries % t.n_way:
            raise ConfigError(f"queries ({t.queries}) must be divisible by n_way ({t.n_way})")
        m = self.model
        if m.backbone not in ("mlp", "conv4"):
            raise ConfigError(f"unknown backbone {m.backbone!r}")
        if not 0.0 < m.alpha_init < 1.0:
            raise ConfigError("alpha_init must lie strictly inside (0, 1)")
        if m.scale_init != "auto":
            try:
                float(m.scale_init)
            except ValueError:
                raise ConfigError("scale_init must be 'auto' or a number") from None
        if self.adaptation.modulation not in ("on", "ones", "off"):
            raise ConfigError(f"unknown modulation mode {self.adaptation.modulation!r}")
        return self


_SECTIONS = ("run", "task", "model", "adaptation")


def _coerce(section: str, key: str, raw: str, target_type: type):
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("on", "true", "yes", "1"):
            return True
        if lowered in ("off", "false", "no", "0"):
            return False
        raise ConfigError(f"{section}.{key}: expected on/off, got {raw!r}")
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(
            f"{section}.{key}: expected {target_type.__name__}, got {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    config = RunConfig()
    known = {name: {f.name: f.type for f in fields(getattr(config, name))}
             for name in _SECTIONS}
    for section_name in parser.sections():
        if section_name not in known:
            raise ConfigError(f"unknown config section [{section_name}]")
        section = getattr(config, section_name)
        types = {f.name: type(getattr(section, f.name)) for f in fields(section)}
        for key, raw in parser.items(section_name):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
            setattr(section, key, _coerce(section_name, key, raw, types[key]))
    return config.validate()


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text())


def apply_flag_overrides(config: RunConfig, *, seed: Optional[int] = None,
                         out: Optional[str] = None, episodes: Optional[int] = None,
                         first_order: bool = False, no_modulation: bool = False,
                         no_pseudo: bool = False) -> RunConfig:
    run = replace(config.run,
                  **({"seed": seed} if seed is not None else {}),
                  **({"out": out} if out is not None else {}),
                  **({"eval_episodes": episodes} if episodes is not None else {}))
    adaptation = config.adaptation
    if first_order:
        adaptation = replace(adaptation, second_order=False)
    if no_modulation:
        adaptation = replace(adaptation, modulation="ones")
    if no_pseudo:
        adaptation = replace(adaptation, pseudo_labels=False, modulation="off",
                             prop_loss_weight=0.0)
    return replace(config, run=run, adaptation=adaptation).validate()
