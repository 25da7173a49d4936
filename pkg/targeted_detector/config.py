"""
Configuration for the targeted detector.

A run is configured by a flat ``section.field = value`` text file; command-line
flags override file values.
"""
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from targeted_detector.errors import ConfigError, DimensionError


def _default_iou_thresholds() -> Tuple[float, ...]:
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class ModelConfig:
    """Network sizes. ``n_classes`` and ``vocab_size`` of 0 are filled from the data."""

    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_object_queries: int = 16
    n_target_queries: int = 8
    n_classes: int = 0
    vocab_size: int = 0
    ffn_dim: int = 128
    max_targets_per_sample: int = 4
    freeze_token_embeddings: bool = False

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise DimensionError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads:
            raise DimensionError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.d_model % 4:
            raise DimensionError(f"d_model {self.d_model} must be divisible by 4")
        if self.n_target_queries < 2:
            raise DimensionError("n_target_queries must leave room for [CLS] and [SEP]")
        if self.max_targets_per_sample < 1:
            raise DimensionError("max_targets_per_sample must be at least 1")
        if self.n_object_queries < 1:
            raise DimensionError("n_object_queries must be at least 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid_size ** 2

    @property
    def no_object_class(self) -> int:
        return self.n_classes

    @property
    def no_target_index(self) -> int:
        return self.max_targets_per_sample


@dataclass
class LossWeights:
    """Coefficients of the class (k_C), box (k_B) and target-index (k_I) terms."""

    k_class: float = 1.0
    k_box: float = 5.0
    k_index: float = 1.0
    no_object_weight: float = 0.1

    def __post_init__(self) -> None:
        if min(self.k_class, self.k_box, self.k_index) < 0:
            raise ConfigError("loss coefficients must be nonnegative")
        if max(self.k_class, self.k_box, self.k_index) <= 0:
            raise ConfigError("at least one loss coefficient must be positive")
        if not 0.0 < self.no_object_weight <= 1.0:
            raise ConfigError("no_object_weight must lie in (0, 1]")


@dataclass
class SamplingConfig:
    all_token_probability: float = 0.5
    deceptive_rate: float = 0.0
    global_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.all_token_probability <= 1.0:
            raise ConfigError("all_token_probability must lie in [0, 1]")
        if self.deceptive_rate < 0:
            raise ConfigError("deceptive_rate must be nonnegative")


@dataclass
class EvalConfig:
    """
    COCO-style evaluation settings. Area thresholds are given for 640-pixel
    images and scaled by ``(image_size / reference_size) ** 2``.
    """

    iou_thresholds: Tuple[float, ...] = field(default_factory=_default_iou_thresholds)
    small_area: float = 32.0 ** 2
    large_area: float = 96.0 ** 2
    reference_size: int = 640
    score_source: str = "class"
    max_detections: int = 100

    def __post_init__(self) -> None:
        thresholds = tuple(float(t) for t in self.iou_thresholds)
        if not thresholds:
            raise ConfigError("iou_thresholds must not be empty")
        if any(not 0.0 < t <= 1.0 for t in thresholds):
            raise ConfigError("iou_thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigError("iou_thresholds must be strictly increasing")
        self.iou_thresholds = thresholds
        if not 0 < self.small_area < self.large_area:
            raise ConfigError("size bucket thresholds must be increasing and positive")
        if self.score_source not in ("class", "class_x_index"):
            raise ConfigError(f"unknown score_source {self.score_source!r}")
        if self.max_detections < 1:
            raise ConfigError("max_detections must be at least 1")

    def area_bounds(self, image_size: int) -> Tuple[float, float]:
        factor = (image_size / self.reference_size) ** 2
        return self.small_area * factor, self.large_area * factor


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    checkpoint_every: int = 100
    log_every: int = 50
    epochs_of_sampling: int = 1
    show_progress: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be at least 1")
        if self.epochs_of_sampling < 1:
            raise ConfigError("epochs_of_sampling must be at least 1")


@dataclass
class PathConfig:
    annotations: str = "data/annotations.json"
    dataset: str = "data/targeted.jsonl"
    checkpoint: str = "runs/model"
    out_dir: str = "runs"
    word_vectors: str = ""


@dataclass
class RunConfig:
    """Everything one command needs. ``seed`` has no default."""

    seed: int
    workers: int = 1
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    debug_checks: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def __post_init__(self) -> None:
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def to_text(self) -> str:
        lines: List[str] = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    lines.append(f"{f.name}.{sub.name} = {_format_value(getattr(value, sub.name))}")
            else:
                lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


_SECTIONS = {
    f.name: f.default_factory
    for f in dataclasses.fields(RunConfig)
    if f.default_factory is not dataclasses.MISSING
}


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
        if origin is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for {key}") from exc
    raise ConfigError(f"unsupported type for {key}")


def parse_assignments(pairs: Dict[str, str]) -> RunConfig:
    """Build a RunConfig from ``section.field -> raw string`` pairs."""
    top: Dict[str, Any] = {}
    sections: Dict[str, Dict[str, Any]] = {}
    top_hints = typing.get_type_hints(RunConfig)

    for key, raw in pairs.items():
        if "." in key:
            section, _, name = key.partition(".")
            factory = _SECTIONS.get(section)
            if factory is None:
                raise ConfigError(f"unknown config section {section!r}")
            hints = typing.get_type_hints(factory)
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            sections.setdefault(section, {})[name] = _coerce(raw, hints[name], key)
        else:
            if key not in top_hints or key in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(raw, int if key == "seed" else top_hints[key], key)

    if top.get("seed") is None:
        raise ConfigError("seed is mandatory: set it in the config file or pass --seed")
    kwargs = {k: v for k, v in top.items() if k not in _SECTIONS}
    for section, factory in _SECTIONS.items():
        kwargs[section] = factory(**sections.get(section, {}))
    return RunConfig(**kwargs)


def read_assignments(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def parse_config_text(text: str, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    pairs = read_assignments(text)
    pairs.update(overrides or {})
    return parse_assignments(pairs)


def load_config(
    path: Optional[Union[str, Path]], overrides: Optional[Dict[str, str]] = None
) -> RunConfig:
    """
    Read a config file (or nothing) and apply overrides; overrides win.

    Args:
        path: Config file path, or None to build from overrides alone
        overrides: ``section.field`` keys mapped to raw string values

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: unreadable file, unknown key, bad value or missing seed
    """
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, overrides)
