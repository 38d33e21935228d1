"""Experiment configuration: one INI-style key-value file mirroring the dataclasses.

Example::

    [paths]
    events = rec/events.csv
    labels = rec/labels.csv
    weights = out/weights.bin
    output_dir = out

    [slice]
    mode = dynamic
    n_events = 20
    num_bins = 64

    [filter]
    tau_mem = 5
    tau_syn = 5
    size = 20

    [loss]
    lambda_box = 7.5

    [train]
    iterations = 576
    seed = 0

An ``[experiment]`` section holds ``seed`` and ``holdout``. Unknown sections or
keys are errors. Every key is optional.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .learning import LossWeights, TrainConfig
from .slicing import SliceConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    events: str | None = None
    labels: str | None = None
    weights: str | None = None
    network: str | None = None
    output_dir: str = "."

    def require(self, *names: str) -> None:
        """Fail early if a referenced input does not exist."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"paths.{name} is not set")
            if not Path(value).exists():
                raise ConfigError(f"paths.{name}: {value} does not exist")


@dataclass(frozen=True)
class FilterParams:
    tau_mem: float = 5.0
    tau_syn: float = 5.0
    size: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    slice: SliceConfig = field(default_factory=lambda: SliceConfig.dynamic(20))
    filter: FilterParams = field(default_factory=FilterParams)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    # fraction of anchors (taken from the end of the recording) held out for validation
    holdout: float = 0.2
    seed: int = 0

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


_EXPERIMENT_KEYS = {"holdout", "seed"}
_SECTIONS = {"paths": Paths, "slice": SliceConfig, "filter": FilterParams, "loss": LossWeights, "train": TrainConfig}


def _convert(raw: str, annotation: str):
    """Parse ``raw`` according to a field annotation string such as ``'int | None'``."""
    text = raw.strip()
    if "None" in annotation and text.lower() in ("", "none"):
        return None
    if "bool" in annotation:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in annotation:
        return int(text)
    if "float" in annotation:
        return float(text)
    return text


def _apply(obj, values: dict, where: str):
    known = {f.name: str(f.type) for f in fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            updates[key] = _convert(raw, known[key]) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{where}.{key}: {exc}") from None
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path=None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        values = dict(parser[section])
        if section == "experiment":
            extra = set(values) - _EXPERIMENT_KEYS
            if extra:
                raise ConfigError(f"{path}: unknown key(s) {sorted(extra)} in [experiment]")
            cfg = _apply(cfg, values, section)
        elif section in _SECTIONS:
            cfg = replace(cfg, **{section: _apply(getattr(cfg, section), values, section)})
        else:
            raise ConfigError(f"{path}: unknown section [{section}]")
    return cfg


def override(cfg: ExperimentConfig, section: str, **values) -> ExperimentConfig:
    """Apply non-None command-line values on top of a section."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section == "experiment":
        return _apply(cfg, values, section)
    return replace(cfg, **{section: _apply(getattr(cfg, section), values, section)})
