"""JSON experiment configs: parsing, defaults, sweep axes.

A config document looks like::

    {
      "task": {"kind": "bandit", "num_prompts": 8, "num_responses": 16,
               "reward_gen": {"type": "uniform"}, "seed": 0},
      "reference": "uniform",
      "train": {"scheme": "GVPO", "beta": 1.0, "steps": 20000, ...},
      "sweep": [{"path": "train.beta", "values": [0.1, 0.5, 1, 2]}],
      "compare": {"schemes": ["GVPO", "GRPO"], "seeds": [0, 1]},
      "output_dir": "runs/demo",
      "emit": {"csv": true, "json": true}
    }

Every key is optional.  The task defaults to the 8x16 uniform-reward bandit
and the reference (the fixed auxiliary policy) to uniform logits.  The initial
policy is the reference unless ``init`` says otherwise.  ``reference`` and
``init`` accept ``"uniform"``, ``{"logits": [[...]]}`` or
``{"random_scale": s, "seed": n}``.
"""

from __future__ import annotations

import copy
import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .policy import PolicyError, PolicyParams, flat_policy, init_uniform, random_policy
from .schemes import SCHEMES, SchemeError
from .taskenv import TaskError, TaskSpec, task_from_config
from .trainer import ConfigError, TrainConfig

TOP_LEVEL = ("task", "reference", "init", "train", "sweep", "compare", "output_dir", "emit", "thresholds", "parallel")
DEFAULT_TASK = {"kind": "bandit", "num_prompts": 8, "num_responses": 16,
                "reward_gen": {"type": "uniform", "lo": 0.0, "hi": 1.0}, "seed": 0}
OUTPUT_ROOT_ENV = "GVPOLAB_OUTPUT_ROOT"


@dataclass
class SweepAxis:
    path: str
    values: list

    @property
    def label(self) -> str:
        return self.path.rsplit(".", 1)[-1]


@dataclass
class ExperimentConfig:
    task: TaskSpec
    train: TrainConfig
    reference: PolicyParams
    init: PolicyParams
    raw: dict[str, Any]
    sweep: list[SweepAxis] = field(default_factory=list)
    schemes: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    output_dir: str | None = None
    emit_csv: bool = True
    emit_json: bool = True

    def resolved(self) -> dict[str, Any]:
        """Fully expanded config: defaults filled in, task rewards embedded."""
        out = copy.deepcopy(self.raw)
        out["task"] = self.task.to_json()
        out["train"] = self.train.to_json()
        out["reference"] = {"logits": self.reference.theta.tolist()}
        out["init"] = {"logits": self.init.theta.tolist()}
        out["emit"] = {"csv": self.emit_csv, "json": self.emit_json}
        return out


def _policy_from(doc, task: TaskSpec, name: str) -> PolicyParams:
    if doc is None or doc == "uniform":
        return init_uniform(task)
    if not isinstance(doc, dict):
        raise ConfigError(name, f"expected 'uniform' or an object, got {doc!r}")
    try:
        if "logits" in doc:
            pol = flat_policy(doc["logits"])
        elif "random_scale" in doc:
            rng = np.random.default_rng(int(doc.get("seed", 0)))
            pol = random_policy(task, rng, float(doc["random_scale"]))
        else:
            raise ConfigError(name, "needs 'logits' or 'random_scale'")
    except PolicyError as exc:
        raise ConfigError(name, str(exc)) from exc
    if (pol.num_prompts, pol.num_responses) != task.shape:
        raise ConfigError(name, f"shape {(pol.num_prompts, pol.num_responses)} does not match task {task.shape}")
    return pol


def _train_from(doc: dict) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("train", "must be an object")
    try:
        return TrainConfig.from_json(copy.deepcopy(doc))
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
    except SchemeError as exc:
        raise ConfigError("train.grpo", str(exc)) from exc
    except TypeError as exc:
        # unknown keys inside nested sections
        raise ConfigError("train", str(exc)) from exc


def parse_config(doc: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a JSON object")
    unknown = sorted(set(doc) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(unknown[0], "unknown top-level field")
    try:
        task = task_from_config(doc.get("task", DEFAULT_TASK))
    except (TaskError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError("task", str(exc)) from exc
    train = _train_from(doc.get("train", {}))
    reference = _policy_from(doc.get("reference"), task, "reference")
    init = reference if doc.get("init") in (None, "reference") else _policy_from(doc["init"], task, "init")

    axes = []
    for i, ax in enumerate(doc.get("sweep") or []):
        if not isinstance(ax, dict) or "path" not in ax or "values" not in ax:
            raise ConfigError(f"sweep[{i}]", "each axis needs 'path' and 'values'")
        if not isinstance(ax["values"], list) or not ax["values"]:
            raise ConfigError(f"sweep[{i}].values", "must be a non-empty list")
        axes.append(SweepAxis(str(ax["path"]), list(ax["values"])))

    cmp = doc.get("compare") or {}
    names = [str(s).upper() for s in cmp.get("schemes", [])]
    for s in names:
        if s not in SCHEMES:
            raise ConfigError("compare.schemes", f"{s!r} is not one of {', '.join(SCHEMES)}")
    seeds = [int(s) for s in cmp.get("seeds", [])]

    emit = doc.get("emit") or {}
    cfg = ExperimentConfig(task, train, reference, init, copy.deepcopy(doc), axes, names, seeds,
                           doc.get("output_dir"), bool(emit.get("csv", True)), bool(emit.get("json", True)))
    known = cfg.resolved()
    known["task"] = {**known["task"], **(doc.get("task") or DEFAULT_TASK)}
    for i, ax in enumerate(axes):
        if not path_exists(known, ax.path):
            raise ConfigError(f"sweep[{i}].path", f"{ax.path!r} is not a config path")
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    return parse_config(doc)


# ---------------------------------------------------------------- sweep paths

# shorthand: the replay mixture ratio is one axis value [historical, fresh] or "h:f"
MIX_PATH = "train.sampler.mix"


def path_exists(doc: dict, path: str) -> bool:
    if path == MIX_PATH:
        return True
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return True


def _parse_mix(value) -> tuple[int, int]:
    if isinstance(value, str) and ":" in value:
        value = value.split(":")
    try:
        h, f = (int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(MIX_PATH, f"expected [historical, fresh], got {value!r}") from exc
    return h, f


def set_path(doc: dict, path: str, value) -> None:
    """Set ``path`` (dot separated) in a raw config document, creating sections as needed."""
    if path == MIX_PATH:
        h, f = _parse_mix(value)
        sampler = doc.setdefault("train", {}).setdefault("sampler", {})
        sampler.update(kind="replay_mixture", historical_count=h, fresh_count=f)
        return
    parts = path.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ":".join(format_value(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def sweep_cells(cfg: ExperimentConfig) -> list[tuple[dict[str, Any], dict[str, Any]]]:
    """Cartesian product of the axes as ``(axis_values, raw_doc)`` pairs, first axis slowest."""
    labels = [ax.label for ax in cfg.sweep]
    use_full = len(set(labels)) != len(labels)
    out = []
    for combo in itertools.product(*(ax.values for ax in cfg.sweep)):
        doc = copy.deepcopy(cfg.raw)
        doc.pop("sweep", None)
        doc.setdefault("task", copy.deepcopy(DEFAULT_TASK))
        values = {}
        for ax, v in zip(cfg.sweep, combo):
            set_path(doc, ax.path, copy.deepcopy(v))
            values[ax.path if use_full else ax.label] = v
        out.append((values, doc))
    return out


def cell_name(values: dict[str, Any]) -> str:
    return "_".join(f"{k}={format_value(v)}" for k, v in values.items()).replace("/", "-")


def output_dir(cfg: ExperimentConfig, override: str | None, config_path: str | None, command: str) -> Path:
    if override:
        return Path(override)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stem = Path(config_path).stem if config_path else command
    return root / stem
