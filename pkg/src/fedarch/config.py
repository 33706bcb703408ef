"""Experiment configuration: schema, parsing with field-path diagnostics, and
named presets.

A configuration is a YAML (or JSON) document with five sections::

    name: my-run
    dataset:    {source: synthetic, samples_per_class: 100, noise_std: 2.0, ...}
    partition:  {preset: split3, num_clients: 5, seed: 0}
    model:      {arch: tiny-cnn, norm: batch, ...}
    federation: {algorithm: fedavg, rounds: 50, local_epochs: 1, schedule: {...}, optimizer: {...}}
    report:     {output_dir: results/my-run, target: auto}

Every field is optional; omitted fields take the defaults of the dataclasses
below. ``docs/config.md`` lists them all.
"""
from __future__ import annotations

import copy
import dataclasses
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SyntheticSpec
from .federation import ALGORITHMS, FederationConfig
from .models import ModelSpec
from .partition import PRESETS as PARTITION_PRESETS


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds ``(field path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # "synthetic" or "flds"
    path: str | None = None
    num_classes: int = 10
    samples_per_class: int = 100
    image_size: int = 16
    channels: int = 1
    noise_std: float = 2.0
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    normalize: bool = True

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=self.num_classes,
            samples_per_class=self.samples_per_class,
            image_size=self.image_size,
            channels=self.channels,
            noise_std=self.noise_std,
            seed=self.seed,
            split=tuple(self.split),
        )


@dataclass
class PartitionConfig:
    preset: str | None = "iid"
    num_clients: int = 5
    seed: int = 0
    # explicit table, one list of [class_id, fraction] pairs per client; overrides preset
    class_assignment: list | None = None


@dataclass
class ReportConfig:
    output_dir: str = "results"
    target: float | str = "auto"  # accuracy in (0, 1], or "auto" (0.95 x centralized baseline)
    baseline_ratio: float = 0.95
    record_wall_time: bool = False


@dataclass
class SweepConfig:
    axis: str | None = None
    values: list | None = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    federation: FederationConfig = field(default_factory=FederationConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is Any:
        return True
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    if origin in (tuple, list) or hint in (tuple, list):
        if not isinstance(value, (list, tuple)):
            return False
        args = typing.get_args(hint)
        if origin is tuple and args and args[-1] is not Ellipsis:
            return len(value) == len(args) and all(_type_ok(v, h) for v, h in zip(value, args))
        return all(_type_ok(v, args[0]) for v in value) if args else True
    return isinstance(value, hint) if isinstance(hint, type) else True


def _coerce(value, hint):
    """Normalize a type-checked value: ints to floats, lists to tuples."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        for h in typing.get_args(hint):
            if _type_ok(value, h):
                return _coerce(value, h)
    if hint is float and isinstance(value, int):
        return float(value)
    if origin is tuple:
        args = typing.get_args(hint)
        if args and args[-1] is not Ellipsis:
            return tuple(_coerce(v, h) for v, h in zip(value, args))
        return tuple(value)
    return value


def _describe(hint) -> str:
    return str(hint).replace("typing.", "").replace("NoneType", "null")


def _build(cls, data, path: str, errors: list[tuple[str, str]]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append((path or "<root>", f"expected a mapping, got {type(data).__name__}"))
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            errors.append((f"{path}.{key}" if path else str(key), "unknown field"))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        hint = hints[f.name]
        value = data[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, sub, errors)
        elif _type_ok(value, hint):
            kwargs[f.name] = _coerce(value, hint)
        else:
            errors.append((sub, f"expected {_describe(hint)}, got {value!r}"))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append((path or "<root>", str(exc)))
        return cls()


def _validate(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    errs: list[tuple[str, str]] = []
    d, p, m, fed, rep = cfg.dataset, cfg.partition, cfg.model, cfg.federation, cfg.report
    if d.source not in ("synthetic", "flds"):
        errs.append(("dataset.source", "must be 'synthetic' or 'flds'"))
    if d.source == "flds" and not d.path:
        errs.append(("dataset.path", "required when source is 'flds'"))
    if d.source == "synthetic":
        try:
            d.synthetic_spec()
        except ValueError as exc:
            errs.append(("dataset", str(exc)))
        for name in ("num_classes", "image_size", "channels"):
            if getattr(d, name) != getattr(m, name):
                errs.append((f"model.{name}", f"must equal dataset.{name} ({getattr(d, name)})"))
    if p.class_assignment is None:
        if p.preset not in PARTITION_PRESETS:
            errs.append(("partition.preset", f"must be one of {PARTITION_PRESETS} or give class_assignment"))
    else:
        ok = isinstance(p.class_assignment, list) and all(
            isinstance(client, list)
            and all(isinstance(pair, (list, tuple)) and len(pair) == 2 for pair in client)
            for client in p.class_assignment
        )
        if not ok:
            errs.append(("partition.class_assignment", "must be a list (per client) of [class_id, fraction] pairs"))
    if p.num_clients < 1 and p.preset != "edge_case":
        errs.append(("partition.num_clients", "must be >= 1"))
    errs += [(f"model.{v.split(' ')[0]}", v) for v in m.violations()]
    errs += [(f"federation.{k}", msg) for k, msg in fed.violations()]
    if fed.num_clients is not None and p.preset != "edge_case" and fed.num_clients != p.num_clients:
        errs.append(("federation.num_clients", f"must equal partition.num_clients ({p.num_clients})"))
    if isinstance(rep.target, str):
        if rep.target != "auto":
            errs.append(("report.target", "must be a number in (0, 1] or 'auto'"))
    elif not 0 < rep.target <= 1:
        errs.append(("report.target", "must lie in (0, 1]"))
    if not 0 < rep.baseline_ratio <= 1:
        errs.append(("report.baseline_ratio", "must lie in (0, 1]"))
    return errs


def parse_config(data: dict) -> ExperimentConfig:
    """Build and cross-validate a config; raises :class:`ConfigError`."""
    errors: list[tuple[str, str]] = []
    cfg = _build(ExperimentConfig, data, "", errors)
    if not errors:
        errors = _validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-08``),
    which JSON emits and YAML 1.1 would leave as strings."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


def load_config_text(text: str) -> ExperimentConfig:
    try:
        data = yaml_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([("<document>", f"not valid YAML/JSON: {exc}")]) from exc
    if isinstance(data, dict) and "config" in data and "final_accuracy" in data:
        data = data["config"]  # a summary.json: re-run its config echo
    return parse_config(data)


def load_config(source: str) -> ExperimentConfig:
    """Load a config from a file path or a preset name."""
    path = Path(source)
    if path.is_file():
        return load_config_text(path.read_text())
    if source in preset_names():
        return preset(source)
    raise ConfigError([("<document>", f"no such file or preset: {source}")])


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# ---------------------------------------------------------------------------
# dotted-path access (sweeps and --set overrides)
# ---------------------------------------------------------------------------

AXIS_ALIASES = {
    "E": "federation.local_epochs",
    "K": "partition.num_clients",
    "mu": "federation.mu",
    "beta": "federation.beta",
    "lambda_ewc": "federation.lambda_ewc",
    "share_fraction": "federation.share_fraction",
    "sample_fraction": "federation.sample_fraction",
    "rounds": "federation.rounds",
    "lr": "federation.schedule.base_lr",
    "seed": "federation.seed",
}


def resolve_path(path: str) -> str:
    return AXIS_ALIASES.get(path, path)


def field_hint(path: str):
    """Type hint of a dotted config field, or ``None`` if the field does not exist."""
    cls = ExperimentConfig
    parts = resolve_path(path).split(".")
    for i, part in enumerate(parts):
        if not dataclasses.is_dataclass(cls):
            return None
        hints = typing.get_type_hints(cls)
        if part not in hints:
            return None
        cls = hints[part]
        if i < len(parts) - 1 and not dataclasses.is_dataclass(cls):
            return None
    return cls


def is_numeric_field(path: str) -> bool:
    hint = field_hint(path)
    if hint is None:
        return False
    args = typing.get_args(hint) if typing.get_origin(hint) in (typing.Union, types.UnionType) else (hint,)
    return any(a in (int, float) for a in args)


def with_value(cfg: ExperimentConfig, path: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one dotted field replaced, re-validated."""
    data = cfg.to_dict()
    node = data
    parts = resolve_path(path).split(".")
    if field_hint(path) is None:
        raise ConfigError([(path, "unknown field")])
    for part in parts[:-1]:
        node = node[part]
    hint = field_hint(path)
    if hint is int or (typing.get_origin(hint) in (typing.Union, types.UnionType) and int in typing.get_args(hint)
                       and float not in typing.get_args(hint)):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
    node[parts[-1]] = value
    return parse_config(data)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESET_MODELS = {
    "cnn-bn": {"arch": "tiny-cnn", "norm": "batch"},
    "cnn-gn": {"arch": "tiny-cnn", "norm": "group"},
    # 8x8 patches (4 tokens on 16x16 inputs) train far better from scratch at this scale
    "vit": {"arch": "tiny-vit", "patch_size": 8},
}
PRESET_PARTITIONS = ("iid", "split2", "split3")

# Desk-scale optimizer choices. TinyCNN trains with SGD + momentum; TinyViT
# from scratch does not move under SGD at this scale and uses AdamW.
_OPTIMIZERS = {
    "cnn": {"optimizer": {"kind": "sgd-momentum", "momentum": 0.9, "weight_decay": 0.0},
            "schedule": {"kind": "warmup-cosine", "base_lr": 0.03, "warmup_steps": 20}},
    "vit": {"optimizer": {"kind": "adamw", "weight_decay": 0.05},
            "schedule": {"kind": "warmup-cosine", "base_lr": 0.003, "warmup_steps": 20}},
}

_ALGORITHM_EXTRAS = {
    "fedavg": {},
    "fedavgm": {"beta": 0.3},
    "fedprox": {"mu": 0.1},
    "fedavg-share": {"share_fraction": 0.05},
    "cwt": {},
    "cwt-ewc": {"lambda_ewc": 5000.0},
}

# named hyperparameter presets for the two reference regimes
MU_PRESETS = {"retina": 0.001, "cifar": 0.1}
BETA_PRESETS = {"retina": 0.5, "cifar": 0.3}
BETA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 0.97, 0.99, 0.997)
MU_GRID = (0.001, 0.01, 0.1, 1.0)
E_GRID = (1, 5, 10)


def _preset_dict(partition: str, model: str, algorithm: str) -> dict:
    family = "vit" if model == "vit" else "cnn"
    fed = {"algorithm": algorithm, "rounds": 50, "local_epochs": 1, "batch_size": 32, "clip_norm": 1.0,
           **_ALGORITHM_EXTRAS[algorithm], **copy.deepcopy(_OPTIMIZERS[family])}
    name = f"cifar-like-{partition}-{model}-{algorithm}"
    return {
        "name": name,
        "dataset": {"source": "synthetic", "samples_per_class": 100, "noise_std": 2.0},
        "partition": {"preset": partition, "num_clients": 5},
        "model": dict(PRESET_MODELS[model]),
        "federation": fed,
        "report": {"output_dir": f"results/{name}", "target": "auto"},
    }


def _all_presets() -> dict[str, dict]:
    out = {}
    for part in PRESET_PARTITIONS:
        for model in PRESET_MODELS:
            for alg in ALGORITHMS:
                d = _preset_dict(part, model, alg)
                out[d["name"]] = d
    for model in PRESET_MODELS:
        d = _preset_dict("edge_case", model, "fedavg")
        d["name"] = f"cifar-like-edge-case-{model}-fedavg"
        # 6000 train samples (one client each) and a 3000-sample test split
        d["dataset"].update(samples_per_class=900, split=[2 / 3, 0.0, 1 / 3])
        d["partition"] = {"preset": "edge_case", "num_clients": 1}
        d["federation"].update(rounds=5, sample_fraction=0.01, batch_size=1)
        d["model"]["norm"] = "group"  # one-sample batches rule out BatchNorm
        d["report"] = {"output_dir": f"results/{d['name']}", "target": 0.5}
        out[d["name"]] = d
    d = _preset_dict("split3", "vit", "fedavg")
    d["name"] = "cifar-like-split3-vit-fedavg-e-sweep"
    d["report"]["output_dir"] = f"results/{d['name']}"
    d["sweep"] = {"axis": "E", "values": list(E_GRID)}
    out[d["name"]] = d
    return out


def preset_names() -> list[str]:
    return sorted(_all_presets())


def preset(name: str) -> ExperimentConfig:
    presets = _all_presets()
    if name not in presets:
        raise ConfigError([("<preset>", f"unknown preset {name!r}")])
    return parse_config(presets[name])

