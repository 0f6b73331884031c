"""Run configuration: dataclasses, TOML loading, validation and hashing."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .losses import LossWeights

MODES = (
    "duo_segnet",
    "no_critic",
    "no_unlabeled",
    "single_net",
    "supervised_only",
    "mean_teacher",
    "pseudo_label",
)
INFERENCE_VIEWS = ("f1", "f2", "average")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "dir"
    n: int = 400
    resolution: int = 64
    noise_level: float = 0.1
    data_seed: int = 0
    image_dir: str = ""
    mask_dir: str = ""
    train_fraction: float = 0.8

    def validate(self):
        if self.source not in ("synthetic", "dir"):
            raise ConfigError(f"data.source: must be 'synthetic' or 'dir', got {self.source!r}")
        if self.source == "dir" and not (self.image_dir and self.mask_dir):
            raise ConfigError("data.image_dir / data.mask_dir: required when data.source = 'dir'")
        if self.source == "synthetic":
            if self.n < 5:
                raise ConfigError(f"data.n: must be >= 5, got {self.n}")
            if self.resolution < 32:
                raise ConfigError(f"data.resolution: must be >= 32, got {self.resolution}")
            if not 0 <= self.noise_level < 1:
                raise ConfigError(f"data.noise_level: must be in [0, 1), got {self.noise_level}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"data.train_fraction: must be in (0, 1), got {self.train_fraction}")


@dataclass
class TrainConfig:
    mode: str = "duo_segnet"
    epochs: int = 30
    batch_size: int = 4
    # None: ceil(|labeled + unlabeled| / batch_size), identical across modes
    batches_per_epoch: int | None = None
    k_s: int = 1
    k_c: int = 1
    seg_lr: float = 1e-2
    seg_momentum: float = 0.9
    critic_lr: float = 5e-5
    lambda_s: float = 1.0
    lambda_u: float = 0.3
    lambda_c: float = 0.2
    seed: int = 0
    label_fraction: float = 0.05
    confidence_weighted_agreement: bool = False
    detach_agreement_targets: bool = False
    base_width: int = 8
    depth: int = 3
    critic_base_width: int = 8
    critic_depth: int = 3
    critic_norm: str = "none"
    inference: str = "f1"
    ema_decay: float = 0.99
    consistency_weight: float = 1.0
    pseudo_weight: float = 1.0
    pseudo_rampup: float = 0.2

    @property
    def weights(self):
        return LossWeights(self.lambda_s, self.lambda_u, self.lambda_c)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"train.mode: unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if self.inference not in INFERENCE_VIEWS:
            raise ConfigError(f"train.inference: must be one of {', '.join(INFERENCE_VIEWS)}")
        for name in ("epochs", "batch_size", "k_s", "k_c"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be >= 1, got {getattr(self, name)}")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigError("train.batches_per_epoch: must be >= 1")
        for name in ("seg_lr", "critic_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name}: must be > 0")
        for name in ("lambda_s", "lambda_u", "lambda_c", "seg_momentum", "consistency_weight", "pseudo_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name}: must be >= 0")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError(f"train.label_fraction: must be in (0, 1], got {self.label_fraction}")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError("train.ema_decay: must be in [0, 1]")
        if not 0 <= self.pseudo_rampup <= 1:
            raise ConfigError("train.pseudo_rampup: must be in [0, 1]")
        if self.depth < 2 or self.critic_depth < 2:
            raise ConfigError("train.depth / train.critic_depth: must be >= 2")
        if self.critic_norm not in ("instance", "none"):
            raise ConfigError(f"train.critic_norm: must be 'instance' or 'none', got {self.critic_norm!r}")
        if self.base_width < 4 or self.critic_base_width < 4:
            raise ConfigError("train.base_width / train.critic_base_width: must be >= 4")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.data.validate()
        self.train.validate()
        return self

    def to_dict(self):
        return {"data": asdict(self.data), "train": asdict(self.train)}

    @classmethod
    def from_dict(cls, d):
        d = d or {}
        unknown = set(d) - {"data", "train"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        return cls(
            data=_build(DataConfig, d.get("data", {}), "data"),
            train=_build(TrainConfig, d.get("train", {}), "train"),
        )

    def hash(self):
        return config_hash(self.to_dict())


def _build(cls, values, section):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
        kwargs[key] = _coerce(known[key], value, f"{section}.{key}")
    return cls(**kwargs)


def _coerce(f, value, where):
    default = f.default
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or f.name == "batches_per_epoch":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def config_hash(d):
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path=None, overrides=None):
    """File values over defaults, then ``overrides`` ({section: {key: value}}) on top."""
    raw = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML: {e}") from None
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    return RunConfig.from_dict(raw).validate()
