"""Experiment configuration: sectioned key=value files, typed and validated.

The format is INI-like: six sections (dataset, partition, model, algorithm,
schedule, output) plus an optional probe section. Unknown sections or keys
are rejected; every key has a default, so an empty file is a valid config.
CLI overrides of the form section.key=value are applied before typing.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .algorithms import AlgorithmSpec
from .errors import ConfigError

DATASET_KINDS = ("synthetic", "mnist", "rotated_mnist")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    images: str = ""            # IDX image file, for the mnist kinds
    labels: str = ""            # IDX label file
    subset: int = 0             # 0 = use everything, else seeded subsample
    classes: int = 10           # synthetic only
    n_per_class: int = 100      # synthetic only
    input_dim: int = 64         # synthetic only
    spread: float = 1.0         # synthetic only
    pseudo_m: int = 10          # samples averaged into one pseudo sample
    pseudo_k: int = 0           # pseudo samples per client; 0 = auto


@dataclass
class PartitionConfig:
    clients: int = 10
    alpha: float = 0.1
    test_fraction: float = 0.2


@dataclass
class ModelSpec:
    hidden: tuple[int, ...] = (128, 64)


@dataclass
class ScheduleSpec:
    rounds: int = 100
    local_steps: int = 50
    batch_size: int = 32
    lr: float = 0.001
    eval_every: int = 5
    seed: int = 0


@dataclass
class OutputSpec:
    dir: str = ""
    threshold_acc: float = 0.8
    threshold_worst: float = 0.6


@dataclass
class ProbeSpec:
    classes: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 10
    lr: float = 0.01
    batch_size: int = 32
    holdout: float = 0.2
    pairs: int = 10000


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)


_SECTIONS = {
    "dataset": DatasetSpec,
    "partition": PartitionConfig,
    "model": ModelSpec,
    "algorithm": AlgorithmSpec,
    "schedule": ScheduleSpec,
    "output": OutputSpec,
    "probe": ProbeSpec,
}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _convert(section: str, key: str, raw: str, target_type) -> object:
    try:
        if target_type is bool:
            return _parse_bool(raw)
        if target_type is int:
            return int(raw.strip())
        if target_type is float:
            return float(raw.strip())
        if target_type is str:
            return raw.strip()
        return _parse_int_tuple(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(
    path: str | None = None,
    overrides: list[str] | None = None,
    text: str | None = None,
) -> RunConfig:
    """Parse a config file (or inline text) and apply section.key=value overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    elif text is not None:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc

    raw: dict[str, dict[str, str]] = {
        section: dict(parser.items(section)) for section in parser.sections()
    }
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        raw.setdefault(section.strip(), {})[key.strip()] = value

    cfg = RunConfig()
    for section, entries in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        spec = getattr(cfg, section)
        hints = {f.name: type(getattr(spec, f.name)) for f in fields(spec)}
        for key, value in entries.items():
            if key not in hints:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(spec, key, _convert(section, key, value, hints[key]))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    d, p, m, s, o, pr = cfg.dataset, cfg.partition, cfg.model, cfg.schedule, cfg.output, cfg.probe
    if d.kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {d.kind!r}")
    if d.subset < 0:
        raise ConfigError("dataset.subset must be >= 0")
    if d.kind == "synthetic":
        if d.classes < 2:
            raise ConfigError("dataset.classes must be >= 2")
        if d.n_per_class < 1 or d.input_dim < 1:
            raise ConfigError("dataset.n_per_class and dataset.input_dim must be positive")
        if d.spread < 0:
            raise ConfigError("dataset.spread must be >= 0")
    if d.pseudo_m < 2:
        raise ConfigError("dataset.pseudo_m must be >= 2")
    if d.pseudo_k < 0:
        raise ConfigError("dataset.pseudo_k must be >= 0 (0 = auto)")
    if p.clients < 1:
        raise ConfigError("partition.clients must be >= 1")
    if p.alpha <= 0:
        raise ConfigError("partition.alpha must be positive")
    if not 0.0 < p.test_fraction < 1.0:
        raise ConfigError("partition.test_fraction must lie in (0, 1)")
    if not m.hidden or any(h < 1 for h in m.hidden):
        raise ConfigError("model.hidden must be a list of positive widths")
    try:
        cfg.algorithm.validate()
    except ValueError as exc:
        raise ConfigError(f"algorithm: {exc}") from exc
    if s.rounds < 0:
        raise ConfigError("schedule.rounds must be >= 0")
    if s.local_steps < 1:
        raise ConfigError("schedule.local_steps must be >= 1")
    if s.batch_size < 1:
        raise ConfigError("schedule.batch_size must be >= 1")
    if s.lr <= 0:
        raise ConfigError("schedule.lr must be positive")
    if s.eval_every < 1:
        raise ConfigError("schedule.eval_every must be >= 1")
    if not 0.0 <= o.threshold_acc <= 1.0 or not 0.0 <= o.threshold_worst <= 1.0:
        raise ConfigError("output thresholds must lie in [0, 1]")
    if not pr.classes:
        raise ConfigError("probe.classes must not be empty")
    if pr.epochs < 0:
        raise ConfigError("probe.epochs must be >= 0")
    if pr.lr <= 0 or pr.batch_size < 1 or pr.pairs < 1:
        raise ConfigError("probe lr/batch_size/pairs must be positive")
    if not 0.0 < pr.holdout < 1.0:
        raise ConfigError("probe.holdout must lie in (0, 1)")


def serialize_config(cfg: RunConfig) -> str:
    """Render a config back to file form; parse(serialize(c)) == c."""
    buf = io.StringIO()
    for section in _SECTIONS:
        spec = getattr(cfg, section)
        buf.write(f"[{section}]\n")
        for f in fields(spec):
            buf.write(f"{f.name} = {_format_value(getattr(spec, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict[str, dict[str, object]] = {}
    for section in _SECTIONS:
        spec = getattr(cfg, section)
        out[section] = {
            f.name: (list(v) if isinstance(v := getattr(spec, f.name), tuple) else v)
            for f in fields(spec)
        }
    return out
