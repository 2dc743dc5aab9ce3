"""Run configuration and the sectioned ``key = value`` config files."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict

PRESET_DIR = Path(__file__).parent / "presets"


@dataclass
class ModelConfig:
    n_items: int = 0  # vocabulary size including padding; filled from the dataset
    embed_dim: int = 128
    hidden_dim: int = 100
    latent_dim: int = 64
    filter_height: int = 3
    max_len: int = 200
    disc_hidden: int = 256
    alpha: float = 0.05
    beta: float = 0.5
    contrastive_form: str = "literal"  # or "canonical"
    use_cnn: bool = True
    reduction: str = "user"  # "user": sum over steps, mean over users; "position": mean over steps

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "latent_dim", "filter_height", "disc_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.contrastive_form not in ("literal", "canonical"):
            raise ValueError(f"unknown contrastive_form {self.contrastive_form!r}")
        if self.reduction not in ("user", "position"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    vae_lr: float = 1e-4
    vae_l2: float = 1e-2
    adv_lr: float = 5e-4
    adv_l2: float = 1e-1
    seed: int = 0
    eval_every: int = 0
    clip_norm: float = 5.0
    same_batch: bool = False
    no_avb: bool = False
    eval_noise: bool = False
    dtype: str = "float32"
    checkpoint_every: int = 1
    con_optimizer: str = "sgd"  # optimizer for the contrastive discriminator: "sgd" (adversary settings) or "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.vae_lr <= 0 or self.adv_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the contrastive term needs negatives)")
        if self.con_optimizer not in ("sgd", "adam"):
            raise ValueError(f"con_optimizer must be sgd or adam, not {self.con_optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, not {self.dtype!r}")


@dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {"model": dataclasses.asdict(self.model), "train": dataclasses.asdict(self.train)}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        return cls(ModelConfig(**d.get("model", {})), TrainConfig(**d.get("train", {})))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        """Copy with ``section.key`` or bare-key overrides applied."""
        d = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.rpartition(".")
            if not section:
                section = _section_of(name)
            d[section][name] = value
        return RunConfig.from_dict(d)


def _section_of(name: str) -> str:
    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        if name in {f.name for f in dataclasses.fields(cls)}:
            return section
    raise KeyError(f"unknown config key {name!r}")


def _coerce(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{field.name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``[model]`` / ``[train]`` sections; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    d = (base or RunConfig()).to_dict()
    for section in parser.sections():
        if section not in ("model", "train"):
            raise ValueError(f"unknown config section [{section}]")
        fields = {f.name: f for f in dataclasses.fields(ModelConfig if section == "model" else TrainConfig)}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            d[section][key] = _coerce(fields[key], raw)
    return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def preset(name: str) -> RunConfig:
    path = PRESET_DIR / f"{name}.ini"
    if not path.exists():
        known = ", ".join(sorted(p.stem for p in PRESET_DIR.glob("*.ini")))
        raise ValueError(f"no preset {name!r}; available: {known}")
    return load_config(path)
