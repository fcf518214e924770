"""Run configuration: a flat, typed key-value file.

One line per setting, ``key = value``; ``#`` starts a comment.  Unknown
keys are errors so typos fail before any work starts.  The canonical
serialization (sorted keys, normalized values) feeds the config hash,
which names the run directory: two different configs never share one.
"""

import hashlib
from dataclasses import dataclass, fields

from .errors import InvalidConfigurationError
from .models import ARCHITECTURES, TrainConfig
from .selection import METHODS, THRESHOLDS

LAYER_SELECTORS = ("all", "last", "last2", "last3")
BASELINES = ("mean", "zeros")
_NONE = ""


def _parse_bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise InvalidConfigurationError(f"expected a boolean, got {raw!r}")


def _parse_int_tuple(raw):
    try:
        return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise InvalidConfigurationError(f"expected integers, got {raw!r}") from exc


def parse_mask_alias(alias):
    """Split ``<method>-<percent>[-<layer>]`` into (method, threshold, layer).

    The layer part is optional and not validated here (layer names are
    model-specific); method and percent are checked against the known
    registries.  ``baseline-100`` names the full-width mask.
    """
    parts = alias.split("-")
    if len(parts) not in (2, 3):
        raise InvalidConfigurationError(
            f"mask alias {alias!r} is not '<method>-<percent>' or "
            "'<method>-<percent>-<layer>'"
        )
    method = parts[0]
    if method not in METHODS and method != "baseline":
        raise InvalidConfigurationError(
            f"mask alias {alias!r} names unknown method {method!r}"
        )
    try:
        percent = int(parts[1])
    except ValueError as exc:
        raise InvalidConfigurationError(
            f"mask alias {alias!r} has non-integer percent {parts[1]!r}"
        ) from exc
    threshold = percent / 100.0
    if not any(abs(threshold - known) < 1e-9 for known in THRESHOLDS):
        raise InvalidConfigurationError(
            f"mask alias {alias!r}: percent must be one of "
            f"{tuple(int(t * 100) for t in THRESHOLDS)}"
        )
    layer = parts[2] if len(parts) == 3 else None
    return method, threshold, layer


@dataclass
class RunConfig:
    """Everything a full pipeline run needs, with recipe defaults."""

    dataset: str = "fmnist"
    data_root: str = "data"
    arch: str = "desk"
    split_sizes: tuple = (5000, 5000, 5000, 5000)
    seed: int = 0
    layers: str = "last3"
    grid_layers: str = "last"
    methods: tuple = METHODS
    thresholds: tuple = (0.2, 0.4, 0.6, 0.8)
    flatten_mode: str = "flatten"
    target_learning_rate: float = 1e-5
    target_epochs: int = 300
    target_batch_size: int = 64
    target_stop_at_train_accuracy: float | None = None
    attack_learning_rate: float = 1e-5
    attack_epochs: int = 50
    attack_batch_size: int = 64
    attack_train_fraction: float = 0.8
    meta_learning_rate: float = 1e-3
    meta_epochs: int = 10
    meta_batch_size: int = 32
    ensemble_k: int = 8
    sweep_kmax: int = 12
    shapley_permutations: int = 256
    explain_samples: int = 16
    explain_mask: str = "best"
    explain_baseline: str = "mean"
    out_dir: str = "out"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise InvalidConfigurationError(
                f"unknown architecture {self.arch!r}; known: {sorted(ARCHITECTURES)}"
            )
        self.split_sizes = tuple(int(s) for s in self.split_sizes)
        if len(self.split_sizes) != 4 or any(s < 1 for s in self.split_sizes):
            raise InvalidConfigurationError(
                "split_sizes must be four positive counts"
            )
        if self.layers not in LAYER_SELECTORS:
            raise InvalidConfigurationError(
                f"layers must be one of {LAYER_SELECTORS}, got {self.layers!r}"
            )
        if self.grid_layers not in LAYER_SELECTORS:
            raise InvalidConfigurationError(
                f"grid_layers must be one of {LAYER_SELECTORS}"
            )
        self.methods = tuple(self.methods)
        for method in self.methods:
            if method not in METHODS:
                raise InvalidConfigurationError(
                    f"unknown method {method!r}; known: {METHODS}"
                )
        if not self.methods:
            raise InvalidConfigurationError("at least one method required")
        self.thresholds = tuple(float(t) for t in self.thresholds)
        for t in self.thresholds:
            if not any(abs(t - known) < 1e-9 for known in THRESHOLDS):
                raise InvalidConfigurationError(
                    f"threshold {t} not in {THRESHOLDS}"
                )
        if not self.thresholds:
            raise InvalidConfigurationError("at least one threshold required")
        if not 0.0 < self.attack_train_fraction < 1.0:
            raise InvalidConfigurationError(
                "attack_train_fraction must lie strictly between 0 and 1"
            )
        if self.ensemble_k < 1 or self.sweep_kmax < 1:
            raise InvalidConfigurationError("ensemble sizes must be positive")
        if self.explain_samples < 0:
            raise InvalidConfigurationError("explain_samples must be non-negative")
        if self.explain_mask != "best":
            parse_mask_alias(self.explain_mask)
        if self.explain_baseline not in BASELINES:
            raise InvalidConfigurationError(
                f"explain_baseline must be one of {BASELINES}"
            )
        if self.shapley_permutations < 2 or self.shapley_permutations % 2:
            raise InvalidConfigurationError(
                "shapley_permutations must be even and at least 2"
            )
        for name in ("target_learning_rate", "attack_learning_rate",
                     "meta_learning_rate"):
            if not getattr(self, name) > 0:
                raise InvalidConfigurationError(f"{name} must be positive")
        for name in ("target_epochs", "target_batch_size", "attack_epochs",
                     "attack_batch_size", "meta_epochs", "meta_batch_size"):
            if getattr(self, name) < 1:
                raise InvalidConfigurationError(f"{name} must be at least 1")

    def target_train_config(self, seed):
        return TrainConfig(
            learning_rate=self.target_learning_rate,
            epochs=self.target_epochs,
            batch_size=self.target_batch_size,
            seed=seed,
            stop_at_train_accuracy=self.target_stop_at_train_accuracy,
        )

    def attack_train_config(self, seed):
        return TrainConfig(
            learning_rate=self.attack_learning_rate,
            epochs=self.attack_epochs,
            batch_size=self.attack_batch_size,
            loss="binary_cross_entropy",
            seed=seed,
        )

    def meta_train_config(self, seed):
        return TrainConfig(
            learning_rate=self.meta_learning_rate,
            epochs=self.meta_epochs,
            batch_size=self.meta_batch_size,
            loss="binary_cross_entropy",
            seed=seed,
        )


def _format_value(value):
    if value is None:
        return _NONE
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PARSERS = {
    "dataset": str,
    "data_root": str,
    "arch": str,
    "split_sizes": _parse_int_tuple,
    "seed": int,
    "layers": str,
    "grid_layers": str,
    "methods": lambda raw: METHODS if raw.strip() == "all"
    else tuple(p.strip() for p in raw.split(",") if p.strip()),
    "thresholds": lambda raw: tuple(
        int(p.strip()) / 100.0 for p in raw.split(",") if p.strip()
    ),
    "flatten_mode": str,
    "target_learning_rate": float,
    "target_epochs": int,
    "target_batch_size": int,
    "target_stop_at_train_accuracy": lambda raw: None if raw.strip() == _NONE
    else float(raw),
    "attack_learning_rate": float,
    "attack_epochs": int,
    "attack_batch_size": int,
    "attack_train_fraction": float,
    "meta_learning_rate": float,
    "meta_epochs": int,
    "meta_batch_size": int,
    "ensemble_k": int,
    "sweep_kmax": int,
    "shapley_permutations": int,
    "explain_samples": int,
    "explain_mask": str,
    "explain_baseline": str,
    "out_dir": str,
}


def parse_config_text(text):
    """Parse ``key = value`` lines into a RunConfig; unknown keys fail."""
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigurationError(
                f"line {lineno}: expected 'key = value', got {raw_line!r}"
            )
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise InvalidConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidConfigurationError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](raw_value)
        except InvalidConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise InvalidConfigurationError(
                f"line {lineno}: bad value for {key!r}: {raw_value!r}"
            ) from exc
    return RunConfig(**values)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except FileNotFoundError as exc:
        raise InvalidConfigurationError(f"config file {path} does not exist") from exc


def config_text(config):
    """Canonical serialization: sorted keys, one per line."""
    lines = []
    for f in sorted(fields(config), key=lambda f: f.name):
        value = getattr(config, f.name)
        if f.name == "thresholds":
            rendered = ",".join(str(int(round(t * 100))) for t in value)
        else:
            rendered = _format_value(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(config):
    """12-hex digest of the canonical serialization, minus the output
    directory (moving a run's destination should not rename it)."""
    stripped = "\n".join(
        line for line in config_text(config).splitlines()
        if not line.startswith("out_dir ")
    )
    return hashlib.sha256(stripped.encode("utf-8")).hexdigest()[:12]


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_text(config))
