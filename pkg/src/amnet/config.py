"""Flat ``key = value`` run configuration with typed defaults.

Lines starting with ``#`` and blank lines are ignored.  Lists (feature
sets) are comma separated.  Command-line flags override file values.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from amnet.encoder import EncoderConfig
from amnet.errors import ConfigError
from amnet.features import MaskSpec
from amnet.training import TrainConfig

DATA_DIR_ENV = "AMNET_DATA_DIR"


@dataclass(frozen=True)
class RunConfig:
    # paths; relative paths resolve against the data root
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    results_dir: str = "results"
    truth_dir: str = "truth"
    # encoder
    n_blocks: int = 2
    d_model: int = 256
    n_heads: int = 8
    ffn_hidden: int = 0  # 0 means 4 * d_model
    dropout_rate: float = 0.2
    input_length: int = 100
    # masking
    selection_rate: float = 0.6
    mask_features: tuple[str, ...] = ("correctness", "timeliness", "elapsed_time")
    predict_features: tuple[str, ...] = ("correctness", "timeliness")
    # optimisation
    batch_size: int = 128
    peak_lr: float = 1e-3
    warmup_steps: int = 4000
    pretrain_epochs: int = 10
    pretrain_steps: int = 0  # 0 means use pretrain_epochs
    normalize_loss: bool = True
    finetune_batch_size: int = 128
    finetune_epochs: int = 100
    finetune_warmup_steps: int = 4000
    finetune_peak_lr: float = 1e-3
    patience: int = 5
    augment: bool = True
    # simulator
    n_students: int = 2000
    n_exercises: int = 300
    interactions_per_student: int = 100
    label_fraction: float = 0.05
    review_fraction: float = 0.1  # share of students held out for the review task
    review_rate: float = 0.3
    speed_ability_corr: float = 0.6
    # run control
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        # build the derived objects once so their invariants fire at load time
        self.encoder()
        self.mask_spec()
        self.train_config()
        for name in ("n_students", "n_exercises", "interactions_per_student", "finetune_batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            n_blocks=self.n_blocks,
            d_model=self.d_model,
            n_heads=self.n_heads,
            ffn_hidden=self.ffn_hidden or None,
            dropout_rate=self.dropout_rate,
            input_length=self.input_length,
        )

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(self.selection_rate, frozenset(self.mask_features), frozenset(self.predict_features))

    def train_config(self, finetune: bool = False) -> TrainConfig:
        """Optimiser settings; ``finetune`` swaps in the fine-tuning batch size."""
        return TrainConfig(
            batch_size=self.finetune_batch_size if finetune else self.batch_size,
            peak_lr=self.peak_lr,
            warmup_steps=self.warmup_steps,
            pretrain_epochs=self.pretrain_epochs,
            pretrain_steps=self.pretrain_steps or None,
            normalize_loss=self.normalize_loss,
            finetune_epochs=self.finetune_epochs,
            finetune_warmup_steps=self.finetune_warmup_steps,
            finetune_peak_lr=self.finetune_peak_lr,
            patience=self.patience,
            augment=self.augment,
        )

    def root(self) -> Path:
        return Path(os.environ.get(DATA_DIR_ENV, "."))

    def path(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else self.root() / p

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **values) -> "RunConfig":
        unknown = set(values) - valid_keys()
        if unknown:
            raise ConfigError(f"unknown config key(s) {sorted(unknown)}; valid keys: {', '.join(sorted(valid_keys()))}")
        try:
            return replace(self, **values)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def valid_keys() -> set[str]:
    return {f.name for f in fields(RunConfig)}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: str, raw: str):
    """Convert a raw string to the declared type of ``key``."""
    default = getattr(RunConfig, key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return low in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in valid_keys():
            raise ConfigError(f"config line {n}: unknown key {key!r}; valid keys: {', '.join(sorted(valid_keys()))}")
        values[key] = parse_value(key, raw)
    return values


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides`` (flags win)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_config_text(text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig().with_overrides(**values)
