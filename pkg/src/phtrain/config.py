"""Experiment configuration: YAML loading, validation with field/line diagnostics."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .bundle import ModelSpec
from .errors import ConfigurationError
from .learner import TrainingConfig
from .orchestrator import ExperimentPlan, Policy
from .partition import PartitionSpec
from .preprocess import AugmentConfig

TOP_LEVEL = {"name", "seed", "output", "dataset", "partition", "training", "augment", "model", "plans"}
SYNTHETIC_KEYS = {"n", "proportions", "image_size", "noise", "color_spread"}
DIRECTORY_KEYS = {"path", "labels"}
PLAN_KEYS = {"policy", "cycles", "rounds", "local_epochs", "weighting", "stations"}


class ConfigError(ConfigurationError):
    """Config problem located at ``path`` (dotted key) and optionally ``line``."""

    def __init__(self, path: str, message: str, line: int | None = None, source: str | None = None):
        self.path, self.line, self.source = path, line, source
        where = f"{source}:" if source else ""
        where += f"{line}: " if line else (" " if source else "")
        super().__init__(f"{where}{path}: {message}" if path else f"{where}{message}")


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    dataset: dict
    partition: PartitionSpec
    training: TrainingConfig
    augment: AugmentConfig
    model: dict
    plans: list[dict]
    output: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def digest(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(input_dim, num_classes, int(self.model.get("hidden_units", 0)))

    def experiment_plans(self, station_ids) -> list[ExperimentPlan]:
        out = []
        for p in self.plans:
            stations = tuple(p.get("stations") or station_ids)
            out.append(
                ExperimentPlan(
                    policy=p["policy"],
                    station_ids=stations,
                    cycles=p.get("cycles", 1),
                    rounds=p.get("rounds", 1),
                    local_epochs=p.get("local_epochs"),
                    weighting=p.get("weighting", "by_sample_count"),
                    seed=self.seed,
                )
            )
        return out


def default_config_text() -> str:
    return resources.files("phtrain").joinpath("default_config.yaml").read_text()


def _line_index(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, from the YAML node tree."""
    index: dict[str, int] = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return index

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                p = f"{path}.{key.value}" if path else str(key.value)
                index[p] = key.start_mark.line + 1
                walk(value, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, value in enumerate(node.value):
                p = f"{path}[{i}]"
                index[p] = value.start_mark.line + 1
                walk(value, p)

    if root is not None:
        walk(root, "")
    return index


def _check_keys(section: dict, allowed: set, path: str, fail) -> None:
    if not isinstance(section, dict):
        fail(path, "must be a mapping")
    for key in section:
        if key not in allowed:
            fail(f"{path}.{key}" if path else str(key), f"unknown field (allowed: {', '.join(sorted(allowed))})")


def _build(cls, section: dict, path: str, fail):
    allowed = set(cls.__dataclass_fields__)
    _check_keys(section, allowed, path, fail)
    try:
        return cls(**section)
    except (ConfigurationError, TypeError) as exc:
        msg = str(exc)
        field_name = next((f for f in sorted(allowed, key=len, reverse=True) if f in msg), None)
        fail(f"{path}.{field_name}" if field_name else path, msg)


def parse_config(text: str, source: str | None = None, *, seed: int | None = None, output: str | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    lines = _line_index(text)

    def fail(path, message):
        line = lines.get(path)
        if line is None and "." in path:
            line = lines.get(path.rsplit(".", 1)[0])
        raise ConfigError(path, message, line, source)

    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("", f"invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None, source) from None
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a mapping", 1, source)
    raw = copy.deepcopy(raw)
    _check_keys(raw, TOP_LEVEL, "", fail)
    if seed is not None:
        raw["seed"] = seed
    if output is not None:
        raw["output"] = output

    s = raw.get("seed", 0)
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        fail("seed", "must be a non-negative integer")

    ds = raw.get("dataset")
    if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("synthetic", "directory"):
        fail("dataset", "must contain exactly one of 'synthetic' or 'directory'")
    if "synthetic" in ds:
        syn = ds["synthetic"] or {}
        _check_keys(syn, SYNTHETIC_KEYS, "dataset.synthetic", fail)
        n = syn.get("n")
        if not isinstance(n, int) or n < 1:
            fail("dataset.synthetic.n", "must be a positive integer")
        size = syn.get("image_size", 16)
        if not isinstance(size, int) or size < 2:
            fail("dataset.synthetic.image_size", "must be an integer >= 2")
        for key in ("noise", "color_spread"):
            v = syn.get(key, 0.0)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                fail(f"dataset.synthetic.{key}", "must be a non-negative number")
        props = syn.get("proportions")
        if props is not None:
            values = list(props.values()) if isinstance(props, dict) else props
            if not isinstance(values, list) or not all(isinstance(v, (int, float)) and v >= 0 for v in values):
                fail("dataset.synthetic.proportions", "must be non-negative numbers")
            if abs(sum(values) - 1.0) > 1e-9:
                fail("dataset.synthetic.proportions", f"must sum to 1 (got {sum(values)!r})")
    else:
        ds = copy.deepcopy(ds)
        d = ds["directory"] = ds["directory"] or {}
        _check_keys(d, DIRECTORY_KEYS, "dataset.directory", fail)
        if "path" not in d:
            fail("dataset.directory.path", "required")
        root = Path(d["path"])
        if not root.is_absolute() and base_dir is not None:
            root = base_dir / root
            d["path"] = str(root)
        labels = root / d.get("labels", "labels.csv")
        if not root.is_dir():
            fail("dataset.directory.path", f"directory {root} does not exist")
        if not labels.exists():
            fail("dataset.directory.labels", f"labels file {labels} does not exist")

    part_section = dict(raw.get("partition") or {})
    if "seed" in part_section:
        fail("partition.seed", "set the top-level seed instead")
    part = _build(PartitionSpec, {**part_section, "seed": s}, "partition", fail)
    train_section = dict(raw.get("training") or {})
    if "seed" in train_section:
        fail("training.seed", "set the top-level seed instead")
    training = _build(TrainingConfig, {**train_section, "seed": s}, "training", fail)
    augment = _build(AugmentConfig, raw.get("augment") or {}, "augment", fail)

    model = raw.get("model") or {}
    _check_keys(model, {"hidden_units"}, "model", fail)
    hu = model.get("hidden_units", 0)
    if not isinstance(hu, int) or hu < 0:
        fail("model.hidden_units", "must be a non-negative integer")

    plans = raw.get("plans")
    if not isinstance(plans, list) or not plans:
        fail("plans", "must be a non-empty list")
    seen = set()
    for i, p in enumerate(plans):
        path = f"plans[{i}]"
        _check_keys(p, PLAN_KEYS, path, fail)
        if "policy" not in p:
            fail(f"{path}.policy", "required")
        try:
            policy = Policy(p["policy"])
        except ValueError:
            fail(f"{path}.policy", f"must be one of {[x.value for x in Policy]}")
        if policy in seen:
            fail(f"{path}.policy", f"duplicate policy {policy.value}")
        seen.add(policy)
        stations = p.get("stations") or [f"station-{k}" for k in range(part.station_count)]
        try:
            ExperimentPlan(
                policy=policy,
                station_ids=stations,
                cycles=p.get("cycles", 1),
                rounds=p.get("rounds", 1),
                local_epochs=p.get("local_epochs"),
                weighting=p.get("weighting", "by_sample_count"),
                seed=s,
            )
        except (ConfigurationError, ValueError) as exc:
            fail(path, str(exc))

    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        seed=s,
        dataset=ds,
        partition=part,
        training=training,
        augment=augment,
        model=model,
        plans=plans,
        output=raw.get("output"),
        raw={k: v for k, v in raw.items() if k != "output"},
    )


def load_config(path, *, seed: int | None = None, output: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config: {exc.strerror or exc}", None, str(path)) from None
    return parse_config(text, str(path), seed=seed, output=output, base_dir=path.parent)


def load_default(*, seed: int | None = None, output: str | None = None) -> ExperimentConfig:
    return parse_config(default_config_text(), "default_config.yaml", seed=seed, output=output)


__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "load_default", "default_config_text"]
