"""Pipeline configuration: TOML in, dataclasses out, defaults printable.

One flat TOML file drives the whole experiment; every section maps onto
one stage's config. ``default_config()`` and ``dump_toml()`` round-trip
so ``--dump-defaults`` output is directly usable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .distillation import FilterConfig
from .inversion import InversionConfig
from .network import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "blobs"          # blobs | patterns
    classes: int = 3
    dim: int = 4                 # blobs only
    n_per_class: int = 100
    spread: float = 0.6          # blobs only
    channels: int = 1            # patterns only
    height: int = 8
    width: int = 8
    noise: float = 0.3           # patterns only
    test_per_class: int = 50


@dataclass
class PartitionConfig:
    domains: int = 4
    alpha: float = 0.1
    min_size: int = 0            # 0 = max(2 * train batch, 2 * classes)


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [16])
    input_batchnorm: bool = True
    hidden_batchnorm: bool = True
    conv_channels: list = field(default_factory=lambda: [4])  # patterns models
    kernel: int = 3
    pool: int = 2


@dataclass
class MergeConfig:
    scheme: str = "uniform"      # uniform | datasize
    lam: float = 0.5
    tau: str = "auto"            # "auto" = mean_plus_std, or a float literal
    exclude_outliers: bool = False

    def threshold_args(self):
        if self.tau == "auto":
            return "mean_plus_std", None
        try:
            return "absolute", float(self.tau)
        except (TypeError, ValueError):
            raise ConfigError(f"merge.tau must be 'auto' or a number, got {self.tau!r}")


@dataclass
class DistillStageConfig:
    teacher_conf_min: float = 0.8
    student_entropy_min: float = 0.5
    min_kept: int = 0       # 0: never force transfer, skip when nothing passes
    steps: int = 100
    lr: float = 0.005
    temperature: float = 1.0
    batch_size: int = 64

    def filter_config(self):
        return FilterConfig(self.teacher_conf_min, self.student_entropy_min, self.min_kept)


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.005, batch_size=16, epochs=20))
    merge: MergeConfig = field(default_factory=MergeConfig)
    inversion: InversionConfig = field(default_factory=lambda: InversionConfig(batch_size=128, steps=200, lr=0.1))
    distill: DistillStageConfig = field(default_factory=DistillStageConfig)
    seeds: list = field(default_factory=lambda: [0])
    pseudo_batches: int = 2
    pretrain_fraction: float = 0.0
    pretrain_epochs: int = 0     # 0 = reuse train.epochs
    jobs: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 0.0 <= self.pretrain_fraction < 1.0:
            raise ConfigError("pretrain_fraction must lie in [0, 1)")
        if self.dataset.kind not in ("blobs", "patterns"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")

    def min_size(self):
        if self.partition.min_size > 0:
            return self.partition.min_size
        return max(2 * self.train.batch_size, 2 * self.dataset.classes)


def default_config():
    return PipelineConfig()


_SECTIONS = {
    "dataset": (DatasetConfig, "dataset"),
    "partition": (PartitionConfig, "partition"),
    "model": (ModelConfig, "model"),
    "train": (TrainConfig, "train"),
    "merge": (MergeConfig, "merge"),
    "inversion": (InversionConfig, "inversion"),
    "distill": (DistillStageConfig, "distill"),
}

# TOML spelling for attributes that collide with keywords
_KEY_ALIASES = {"lam": "lambda"}
_ALIAS_KEYS = {v: k for k, v in _KEY_ALIASES.items()}


def _build_section(cls, table, section):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        attr = _ALIAS_KEYS.get(key, key)
        if attr not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def from_toml_str(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from exc
    kwargs = {}
    for name, table in raw.items():
        if name == "pipeline":
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls, attr = _SECTIONS[name]
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[attr] = _build_section(cls, table, name)
    top = raw.get("pipeline", {})
    pipe_fields = {"seeds", "pseudo_batches", "pretrain_fraction", "pretrain_epochs", "jobs"}
    for key in top:
        if key not in pipe_fields:
            raise ConfigError(f"unknown key {key!r} in [pipeline]")
    try:
        return PipelineConfig(**kwargs, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [pipeline] section: {exc}") from exc


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return from_toml_str(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot render {type(v).__name__} as TOML")


def dump_toml(cfg):
    """Render a PipelineConfig as TOML text (the --dump-defaults payload)."""
    lines = []
    for section, (cls, attr) in _SECTIONS.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, attr)
        for f in fields(cls):
            value = getattr(obj, f.name)
            if value is None:
                continue  # optional knobs (e.g. EMA momentum, layer weights)
            key = _KEY_ALIASES.get(f.name, f.name)
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    lines.append("[pipeline]")
    for key in ("seeds", "pseudo_batches", "pretrain_fraction", "pretrain_epochs", "jobs"):
        lines.append(f"{key} = {_toml_value(getattr(cfg, key))}")
    lines.append("")
    return "\n".join(lines)
