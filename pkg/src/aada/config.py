"""Experiment configuration: profiles, flat config files and overrides.

Precedence is CLI flag > config file > profile default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig
from .losses import LossWeights
from .networks import AdapterSpec, ClassifierSpec, DiscriminatorSpec
from .training import DAConfig, SourceTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    width_multiplier: float = 1.0
    middle_blocks: int = 10
    adapter_blocks: int = 16
    adapter_width: int = 256
    adapter_bottleneck: int = 64
    disc_width: int = 64
    pretrained_backbone: str | None = None

    def classifier_spec(self, n: int, l: int) -> ClassifierSpec:
        return ClassifierSpec(n, l, self.width_multiplier, self.middle_blocks, self.pretrained_backbone)

    def adapter_spec(self, n: int) -> AdapterSpec:
        return AdapterSpec(n, self.adapter_blocks, self.adapter_width, self.adapter_bottleneck)

    def disc_spec(self, n: int) -> DiscriminatorSpec:
        return DiscriminatorSpec(n, self.disc_width)


@dataclass
class ExperimentConfig:
    profile: str = "paper"
    seed: int = 0
    source_dir: str | None = None
    target_dir: str | None = None
    output_dir: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    source: SourceTrainConfig = field(default_factory=SourceTrainConfig)
    da: DAConfig = field(default_factory=DAConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {
            "profile": self.profile,
            "seed": self.seed,
            "source_dir": self.source_dir,
            "target_dir": self.target_dir,
            "output_dir": self.output_dir,
        }
        for prefix, obj in (("model", self.model), ("source", self.source), ("da", self.da), ("augment", self.augment)):
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if dataclasses.is_dataclass(value):
                    for g in dataclasses.fields(value):
                        out[f"{prefix}.{f.name}.{g.name}"] = getattr(value, g.name)
                else:
                    out[f"{prefix}.{f.name}"] = value
        return out

    def dump(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self.flat().items()) + "\n"


def paper_profile() -> ExperimentConfig:
    return ExperimentConfig(profile="paper")


def desk_profile() -> ExperimentConfig:
    """Same structure as the full-size settings, scaled to run on one CPU core."""
    return ExperimentConfig(
        profile="desk",
        model=ModelConfig(
            width_multiplier=0.125,
            middle_blocks=2,
            adapter_blocks=4,
            adapter_width=32,
            adapter_bottleneck=16,
            # narrower discriminators are held at p = 0.5 by the variance penalty
            disc_width=32,
        ),
        source=SourceTrainConfig(epochs=12, iterations_per_epoch=100),
        da=DAConfig(epochs=12, iterations_per_epoch=100, selection_start_epoch=6, adapter_warmup_iterations=300),
        augment=AugmentConfig(patch_size=96),
    )


PROFILES = {"paper": paper_profile, "desk": desk_profile}


def profile(name: str) -> ExperimentConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _coerce(raw, current):
    if isinstance(raw, str):
        text = raw.strip()
        if isinstance(current, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"not a boolean: {raw!r}")
        if text.lower() in ("none", "null", ""):
            return None
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if current is None:
            for cast in (int, float):
                try:
                    return cast(text)
                except ValueError:
                    pass
        return text
    return raw


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """Set dotted keys (e.g. ``da.lw.rho``) on a copy of ``cfg``."""
    cfg = dataclasses.replace(cfg)
    # rebuild nested dataclasses so validation in __post_init__ reruns
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in ("model", "source", "da", "augment")}
    top: dict[str, object] = {}
    for key, raw in overrides.items():
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] not in ("profile", "seed", "source_dir", "target_dir", "output_dir"):
                raise ConfigError(f"unknown config key {key!r}")
            top[parts[0]] = _coerce(raw, getattr(cfg, parts[0]))
            continue
        if parts[0] not in sections:
            raise ConfigError(f"unknown config section in {key!r}")
        node = sections[parts[0]]
        for p in parts[1:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _coerce(raw, node[parts[-1]])
    try:
        da = dict(sections["da"])
        da["lw"] = LossWeights(**da["lw"])
        cfg = dataclasses.replace(
            cfg,
            model=ModelConfig(**sections["model"]),
            source=SourceTrainConfig(**sections["source"]),
            da=DAConfig(**da),
            augment=AugmentConfig(**sections["augment"]),
            **top,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.seed is not None:
        cfg.seed = int(cfg.seed)
    return cfg


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def resolve(profile_name: str | None, file_values: dict[str, str] | None = None, cli_values: dict[str, object] | None = None) -> ExperimentConfig:
    file_values = dict(file_values or {})
    file_profile = file_values.pop("profile", None)
    name = profile_name or file_profile or "paper"
    cfg = profile(name)
    if file_values:
        cfg = apply_overrides(cfg, file_values)
    if cli_values:
        cfg = apply_overrides(cfg, cli_values)
    return cfg
