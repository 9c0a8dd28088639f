"""Run configuration: flat `key = value` files, defaults, validation, manifests.

The file format is one `key = value` pair per line; blank lines and lines
starting with `#` are ignored (no inline comments).  Defaults depend on the
dataset kind — the CIFAR-10 protocol and the image-folder (flowers-style)
protocol each ship with their own default hyperparameters.

The run manifest is the effective configuration echoed in the same format,
so re-running from a manifest reproduces the run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError
from .optim import NadamConfig, PlateauConfig

DATASET_KINDS = ("cifar10", "image-folder")

# dataset-conditional defaults: (beta1, factor, epochs, input_size, num_classes)
_PROTOCOL_DEFAULTS = {
    "cifar10": {"beta1": 0.5, "factor": 0.9, "epochs": 100, "input_size": 32, "num_classes": 10},
    "image-folder": {"beta1": 0.9, "factor": 0.8, "epochs": 37, "input_size": 64, "num_classes": 17},
}

_MANIFEST_KEYS = (
    "dataset", "data_dir", "out_dir", "width", "num_classes", "input_size",
    "lr", "beta1", "beta2", "epsilon", "schedule_decay",
    "factor", "patience", "min_delta", "cooldown", "min_lr",
    "epochs", "batch_size", "seed", "augment", "val_fraction",
)


@dataclass
class RunConfig:
    dataset: str
    data_dir: str
    out_dir: str = "run"
    width: int = 128
    num_classes: int = 10
    input_size: int = 32
    lr: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule_decay: float = 0.004
    factor: float = 0.9
    patience: int = 3
    min_delta: float = 1e-4
    cooldown: int = 0
    min_lr: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    augment: str = "none"
    val_fraction: float = 0.1

    def nadam_config(self) -> NadamConfig:
        return NadamConfig(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            schedule_decay=self.schedule_decay,
        )

    def plateau_config(self) -> PlateauConfig:
        return PlateauConfig(
            factor=self.factor,
            patience=self.patience,
            min_delta=self.min_delta,
            cooldown=self.cooldown,
            min_lr=self.min_lr,
        )


def parse_kv_file(path) -> dict[str, str]:
    """Parse key = value lines; `#` lines are comments.  Errors carry line numbers."""
    mapping: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            if not key:
                raise ValidationError(f"{path}:{lineno}: empty key")
            if key in mapping:
                raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
            mapping[key] = value
    return mapping


def _to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ValidationError(f"field {key}: expected an integer, got {value!r}") from None


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ValidationError(f"field {key}: expected a number, got {value!r}") from None


def resolve_config(
    mapping: dict[str, str],
    seed_override: int | None = None,
    data_override: str | None = None,
) -> RunConfig:
    """Turn a parsed mapping into a validated RunConfig with protocol defaults filled in."""
    unknown = set(mapping) - set(_MANIFEST_KEYS)
    if unknown:
        raise ValidationError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    if "dataset" not in mapping:
        raise ValidationError("field dataset: required (cifar10 or image-folder)")
    dataset = mapping["dataset"]
    if dataset not in DATASET_KINDS:
        raise ValidationError(
            f"field dataset: expected one of {DATASET_KINDS}, got {dataset!r}"
        )
    defaults = _PROTOCOL_DEFAULTS[dataset]

    data_dir = data_override if data_override is not None else mapping.get("data_dir", "")
    if not data_dir:
        raise ValidationError("field data_dir: required")

    ints = {
        key: _to_int(key, mapping[key]) if key in mapping else default
        for key, default in (
            ("width", 128),
            ("num_classes", defaults["num_classes"]),
            ("input_size", defaults["input_size"]),
            ("patience", 3),
            ("cooldown", 0),
            ("epochs", defaults["epochs"]),
            ("batch_size", 32),
            ("seed", 0),
        )
    }
    if seed_override is not None:
        ints["seed"] = seed_override
    floats = {
        key: _to_float(key, mapping[key]) if key in mapping else default
        for key, default in (
            ("lr", 0.01),
            ("beta1", defaults["beta1"]),
            ("beta2", 0.999),
            ("epsilon", 1e-8),
            ("schedule_decay", 0.004),
            ("factor", defaults["factor"]),
            ("min_delta", 1e-4),
            ("min_lr", 0.0),
            ("val_fraction", 0.1),
        )
    }
    cfg = RunConfig(
        dataset=dataset,
        data_dir=data_dir,
        out_dir=mapping.get("out_dir", "run"),
        augment=mapping.get("augment", "none"),
        **ints,
        **floats,
    )

    if not 1 <= cfg.width <= 128:
        raise ValidationError(f"field width: must be in [1, 128], got {cfg.width}")
    if cfg.dataset == "cifar10" and cfg.input_size != 32:
        raise ValidationError(
            f"field input_size: cifar10 images are 32x32, got {cfg.input_size}"
        )
    if cfg.dataset == "cifar10" and cfg.num_classes != 10:
        raise ValidationError(
            f"field num_classes: cifar10 has 10 classes, got {cfg.num_classes}"
        )
    if cfg.input_size < 2 or cfg.input_size % 2:
        raise ValidationError(
            f"field input_size: must be even and >= 2 (one 2x2 maxpool), got {cfg.input_size}"
        )
    if cfg.num_classes < 1:
        raise ValidationError(f"field num_classes: must be >= 1, got {cfg.num_classes}")
    if cfg.epochs < 0:
        raise ValidationError(f"field epochs: must be >= 0, got {cfg.epochs}")
    if cfg.batch_size < 1:
        raise ValidationError(f"field batch_size: must be >= 1, got {cfg.batch_size}")
    if cfg.seed < 0:
        raise ValidationError(f"field seed: must be >= 0, got {cfg.seed}")
    if cfg.augment not in ("none", "horizontal-flip"):
        raise ValidationError(
            f"field augment: expected none or horizontal-flip, got {cfg.augment!r}"
        )
    if not 0.0 < cfg.val_fraction < 1.0:
        raise ValidationError(
            f"field val_fraction: must lie in (0, 1), got {cfg.val_fraction}"
        )
    try:
        cfg.nadam_config()
        cfg.plateau_config()
    except ValidationError as exc:
        raise ValidationError(f"field (optimizer/scheduler): {exc}") from None
    return cfg


def load_run_config(path, seed_override=None, data_override=None) -> RunConfig:
    return resolve_config(
        parse_kv_file(path), seed_override=seed_override, data_override=data_override
    )


def config_mapping(cfg: RunConfig) -> dict[str, str]:
    """Effective configuration as strings, in canonical manifest key order."""
    out = {}
    for key in _MANIFEST_KEYS:
        value = getattr(cfg, key)
        out[key] = repr(value) if isinstance(value, float) else str(value)
    return out


def write_manifest(cfg: RunConfig, path) -> None:
    """Echo the effective config; the manifest is itself a loadable config file."""
    lines = ["# effective run configuration"]
    lines.extend(f"{key} = {value}" for key, value in config_mapping(cfg).items())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
