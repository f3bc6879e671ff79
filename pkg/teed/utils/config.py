"""
Configuration dataclasses for the model, loss, optimizer, augmentation and training run,
and loading of run configuration files (TOML or JSON).
"""
import json
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .utils import CROP_SIZE


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)

def check_types(config) -> None:
    """Raise ConfigError for any field of a config dataclass whose value does not fit the declared type"""
    for f in fields(config):
        value = getattr(config, f.name)
        if f.type is float:
            ok = _is_number(value)
        elif f.type is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif f.type is tuple:
            ok = isinstance(value, tuple) and all(_is_number(v) for v in value)
        elif isinstance(f.type, type):
            ok = isinstance(value, f.type)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{type(config).__name__}.{f.name} must be {f.type.__name__}, got {value!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Network shape. Only the three-block smish configuration is supported."""
    block_channels: tuple = (16, 32, 48)
    dfuse_multiplier: int = 8 # DWConv1 maps 3 -> 3 * multiplier channels
    usnet3_width: int = 8 # intermediate width of the two-stage upsampler
    input_scale: float = 1.0 # 1.5 for TEEDup
    activation: str = "smish"

    @property
    def dfuse_channels(self) -> int:
        return 3 * self.dfuse_multiplier

    def validate(self) -> "ModelConfig":
        check_types(self)
        if len(self.block_channels) != 3:
            raise ConfigError(f"Exactly 3 backbone blocks are supported, got {len(self.block_channels)}")
        if any(int(c) < 1 for c in self.block_channels):
            raise ConfigError(f"Block channel widths must be positive, got {self.block_channels}")
        if self.dfuse_multiplier < 1 or self.usnet3_width < 1:
            raise ConfigError("dfuse_multiplier and usnet3_width must be >= 1")
        if self.input_scale <= 0:
            raise ConfigError(f"input_scale must be positive, got {self.input_scale}")
        if self.activation != "smish":
            raise ConfigError(f"Only the smish activation is supported, got {self.activation!r}")
        return self


@dataclass(frozen=True)
class LossConfig:
    """Weights and bands of the double loss"""
    pos_weight: float = 1.1 # lambda, multiplies the positive-class weight
    neg_weight: float = 1.1 # coefficient of the negative-class weight
    gamma_lo: float = 0.1 # gt <= gamma_lo is negative
    gamma_hi: float = 0.3 # gt >= gamma_hi is an edge; values in between are ignored
    w_bdr: float = 1.0
    w_tex: float = 1.0
    radius: int = 2 # Chebyshev radius of the confusing band around edges
    eps: float = 1e-7

    def validate(self) -> "LossConfig":
        check_types(self)
        if not 0.0 <= self.gamma_lo < self.gamma_hi <= 1.0:
            raise ConfigError(f"Need 0 <= gamma_lo < gamma_hi <= 1, got ({self.gamma_lo}, {self.gamma_hi})")
        if min(self.pos_weight, self.neg_weight, self.w_bdr, self.w_tex) < 0:
            raise ConfigError("Loss weights must be >= 0")
        if self.radius < 0:
            raise ConfigError(f"radius must be >= 0, got {self.radius}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        return self


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 8e-4
    lr_decayed: float = 8e-5
    decay_epoch: int = 5 # first (0-based) epoch trained at lr_decayed
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-4

    def validate(self) -> "AdamConfig":
        check_types(self)
        if self.lr <= 0 or self.lr_decayed <= 0:
            raise ConfigError("Learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0 or self.decay_epoch < 0:
            raise ConfigError("eps must be > 0, weight_decay and decay_epoch >= 0")
        return self


@dataclass(frozen=True)
class AugmentConfig:
    hflip_p: float = 0.5
    rot90: bool = True
    max_angle: float = 15.0 # degrees, uniform in [-max_angle, max_angle]
    crop_size: int = CROP_SIZE
    gamma_range: tuple = (0.7, 1.3)

    def validate(self) -> "AugmentConfig":
        check_types(self)
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ConfigError(f"hflip_p must lie in [0, 1], got {self.hflip_p}")
        if self.crop_size < 1 or self.crop_size % 4:
            raise ConfigError(f"crop_size must be a positive multiple of 4, got {self.crop_size}")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ConfigError(f"Invalid gamma_range {self.gamma_range}")
        return self


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs"""
    train_root: str = ""
    train_manifest: str = "" # optional two-column CSV (image_path, gt_path) instead of train_root
    val_root: str = ""
    split: str = "train"
    val_split: str = "test"
    epochs: int = 6
    batch_size: int = 8
    seed: int = 0
    teedup: bool = False
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "output"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self, check_paths=True) -> "RunConfig":
        check_types(self)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.train_root and not self.train_manifest:
            raise ConfigError("One of train_root or train_manifest is required")
        if check_paths:
            for name in ("train_root", "train_manifest", "val_root"):
                path = getattr(self, name)
                if path and not Path(path).exists():
                    raise FileNotFoundError(f"{name} does not exist: {path}")
        self.model.validate()
        self.loss.validate()
        self.adam.validate()
        self.augment.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        nested = {"model": ModelConfig, "loss": LossConfig, "adam": AdamConfig, "augment": AugmentConfig}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"Unknown run configuration key {key!r}")
            if key in nested:
                kwargs[key] = _sub_config(nested[key], value, key)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Read a run configuration from a .toml or .json file

        Args:
            path (str or Path): configuration file

        Returns:
            RunConfig: parsed (not yet validated) configuration
        """
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Run configuration not found: {path}")
        text = path.read_text()
        try:
            raw = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
        return cls.from_dict(raw)

def _sub_config(cls, value, key: str):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"Section {key!r} must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"Unknown keys in section {key!r}: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
