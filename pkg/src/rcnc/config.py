"""Experiment configuration: JSON schema, defaults and model construction."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .network import (GraphError, LayeredGraph, ServiceChain, build_layered_network,
                      cumulative_scaling, validate_graph)
from .traffic import KINDS, ArrivalEntry, ArrivalSpec, read_trace_csv

POLICIES = ("algorithm1", "rcnc", "rcnc-distributed", "backpressure", "greedy", "zero")
AXES = ("V", "lifetime_slack", "slot_scale", "lambda")
AXIS_ALIASES = {"v": "V", "dl": "lifetime_slack", "delta_l": "lifetime_slack",
                "lifetime_slack": "lifetime_slack", "slot-scale": "slot_scale",
                "slot_scale": "slot_scale", "lambda": "lambda", "lam": "lambda"}

DEFAULTS = {
    "mode": "average",
    "policy": "algorithm1",
    "V": 1.0,
    "n": None,
    "K": 2000,
    "kappa": 0.1,
    "window": "cumulative",
    "carry_requests": False,
    "numeric": "integer",
    "seeds": [0],
    "epsilon": 0.01,
    "burn_in": 0,
    "slot_scale": 1.0,
    "record_trace": True,
}

_nonneg = {"type": "number", "minimum": 0}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["graph", "services", "arrivals", "horizon"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "graph": {
            "type": "object",
            "required": ["nodes", "links"],
            "additionalProperties": False,
            "properties": {
                "nodes": {"type": "array", "minItems": 1,
                          "items": {"type": ["string", "integer"]}},
                "links": {"type": "array", "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "a": {"type": ["string", "integer"]},
                        "b": {"type": ["string", "integer"]},
                        "tail": {"type": ["string", "integer"]},
                        "head": {"type": ["string", "integer"]},
                        "capacity": _nonneg,
                        "cost": _nonneg,
                        "directed": {"type": "boolean"},
                    },
                    "required": ["capacity"],
                    "oneOf": [{"required": ["a", "b"]}, {"required": ["tail", "head"]}],
                }},
                "compute": {"type": "object", "additionalProperties": {
                    "type": "object", "required": ["capacity"], "additionalProperties": False,
                    "properties": {"capacity": _nonneg, "cost": _nonneg}}},
            },
        },
        "services": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "required": ["name", "destination", "reliability", "lifetime"],
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "destination": {"type": ["string", "integer"]},
                "reliability": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "lifetime": {"oneOf": [{"type": "integer", "minimum": 1},
                                       {"const": "auto"}]},
                "lifetime_slack": {"type": "integer", "minimum": 0},
                "functions": {"type": "array", "items": {
                    "type": "object", "required": ["scaling", "workload"],
                    "additionalProperties": False,
                    "properties": {"scaling": {"type": "number", "exclusiveMinimum": 0},
                                   "workload": {"type": "number", "exclusiveMinimum": 0}}}},
            },
        }},
        "arrivals": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "required": ["service", "node", "kind"],
            "additionalProperties": False,
            "properties": {
                "service": {"type": "string"},
                "node": {"type": ["string", "integer"]},
                "stage": {"type": "integer", "minimum": 1},
                "lifetime": {"type": "integer", "minimum": 1},
                "kind": {"enum": list(KINDS)},
                "lam": _nonneg, "unit": {"type": "number", "exclusiveMinimum": 0},
                "a_max": _nonneg, "low": {"type": "integer", "minimum": 0},
                "high": {"type": "integer", "minimum": 0},
                "n": {"type": "integer", "minimum": 0},
                "p": {"type": "number", "minimum": 0, "maximum": 1},
                "value": _nonneg,
                "values": {"type": "array", "items": _nonneg, "minItems": 1},
                "path": {"type": "string"}, "column": {"type": ["string", "integer"]},
                "cyclic": {"type": "boolean"},
            },
        }},
        "mode": {"enum": ["average", "peak"]},
        "policy": {"enum": list(POLICIES)},
        "V": _nonneg,
        "n": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]},
        "K": {"type": "integer", "minimum": 1},
        "kappa": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "window": {"enum": ["frame", "cumulative"]},
        "carry_requests": {"type": "boolean"},
        "horizon": {"type": "integer", "minimum": 1},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "output": {"type": "string"},
        "numeric": {"enum": ["integer", "fluid"]},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "burn_in": {"type": "integer", "minimum": 0},
        "slot_scale": {"type": "number", "exclusiveMinimum": 0},
        "record_trace": {"type": "boolean"},
    },
}


class ConfigError(ValueError):
    """Unreadable, schema-violating or inconsistent configuration."""


@dataclass
class ExperimentConfig:
    """A validated configuration with defaults filled in.

    ``raw`` is the resolved mapping; it round-trips through JSON and is what
    the run manifest records.
    """

    raw: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def name(self) -> str:
        return self.raw.get("name", "experiment")

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    def with_values(self, **updates) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw.update(updates)
        return from_mapping(raw, self.base_dir)

    def build(self) -> "Experiment":
        return build_experiment(self)


@dataclass
class Experiment:
    net: LayeredGraph
    spec: ArrivalSpec
    config: ExperimentConfig


def _path(err: jsonschema.ValidationError) -> str:
    return "/" + "/".join(str(p) for p in err.absolute_path)


def validate_mapping(raw: dict) -> None:
    """Schema check; the message lists every violation with its field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = [f"{_path(e)}: {e.message}" for e in errors]
        raise ConfigError("schema violation:\n  " + "\n  ".join(lines))


def from_mapping(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    validate_mapping(raw)
    resolved = copy.deepcopy(DEFAULTS)
    resolved.update(copy.deepcopy(raw))
    resolved.setdefault("name", "experiment")
    resolved.setdefault("output", str(Path("runs") / resolved["name"]))
    cfg = ExperimentConfig(resolved, Path(base_dir))
    _check_references(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a config file (or a run manifest, which embeds one)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from None
    if isinstance(raw, dict) and "config" in raw and "code_version" in raw:
        raw = raw["config"]
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_mapping(raw, path.parent)


def _check_references(cfg: ExperimentConfig) -> None:
    raw = cfg.raw
    nodes = {str(n) for n in raw["graph"]["nodes"]}
    services = {}
    for i, s in enumerate(raw["services"]):
        if s["name"] in services:
            raise ConfigError(f"/services/{i}/name: duplicate service {s['name']!r}")
        services[s["name"]] = s
        if str(s["destination"]) not in nodes:
            raise ConfigError(f"/services/{i}/destination: unknown node {s['destination']!r}")
    for i, a in enumerate(raw["arrivals"]):
        where = f"/arrivals/{i}"
        if a["service"] not in services:
            raise ConfigError(f"{where}/service: unknown service {a['service']!r}")
        if str(a["node"]) not in nodes:
            raise ConfigError(f"{where}/node: unknown node {a['node']!r}")
        stages = len(services[a["service"]].get("functions", ())) + 1
        if a.get("stage", 1) > stages:
            raise ConfigError(f"{where}/stage: service has {stages} stage(s)")
        need = {"poisson": ("lam",), "constant": ("value",), "trace": ()}.get(a["kind"], ())
        for key in need:
            if key not in a:
                raise ConfigError(f"{where}: {a['kind']} arrivals need {key!r}")
        if a["kind"] == "trace" and "values" not in a and "path" not in a:
            raise ConfigError(f"{where}: trace arrivals need 'values' or 'path'")
        if a["kind"] == "uniform" and "lam" not in a and not {"low", "high"} <= a.keys():
            raise ConfigError(f"{where}: uniform arrivals need 'lam' or 'low'/'high'")
        if a["kind"] == "binomial" and "lam" not in a and "n" not in a:
            raise ConfigError(f"{where}: binomial arrivals need 'lam' or 'n'")
    if raw["policy"] == "algorithm1" and raw["mode"] == "peak":
        raise ConfigError("/policy: algorithm1 needs mode 'average'; use rcnc for peak")
    try:
        validate_graph(_graph_mapping(raw))
    except GraphError as exc:
        raise ConfigError(f"/graph: {exc}") from None


def _graph_mapping(raw: dict) -> dict:
    g = copy.deepcopy(raw["graph"])
    s = raw.get("slot_scale", 1.0)
    if s != 1.0:
        for link in g["links"]:
            link["capacity"] = link["capacity"] * s
        for spec in (g.get("compute") or {}).values():
            spec["capacity"] = spec["capacity"] * s
    return g


def _service_lifetime(raw_svc: dict, graph, arrivals: list[dict], scale: float) -> int:
    """Lifetime in slots; ``auto`` is shortest-path hops + functions + slack."""
    slack = int(raw_svc.get("lifetime_slack", 0))
    stages = len(raw_svc.get("functions", ())) + 1
    if raw_svc["lifetime"] == "auto":
        dest = graph.index(str(raw_svc["destination"]))
        dist = graph.hop_distance(dest)
        sources = [a for a in arrivals if a["service"] == raw_svc["name"]]
        hops = [dist[graph.index(str(a["node"]))] for a in sources]
        if not hops or not all(math.isfinite(h) for h in hops):
            raise ConfigError(f"service {raw_svc['name']}: destination unreachable from a source")
        return int(max(hops)) + (stages - 1) + slack
    return max(1, math.ceil(int(raw_svc["lifetime"]) / scale)) + slack


def _entry_params(a: dict, base_dir: Path, scale: float) -> dict:
    keys = ("lam", "unit", "a_max", "low", "high", "n", "p", "value", "values", "cyclic")
    p = {k: a[k] for k in keys if k in a}
    if a["kind"] == "trace" and "values" not in p:
        p["values"] = read_trace_csv(base_dir / a["path"], a.get("column", 0))
    if scale != 1.0:
        for key in ("lam", "value", "a_max"):
            if key in p:
                p[key] = p[key] * scale
        if "values" in p:
            p["values"] = [v * scale for v in p["values"]]
    return p


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    raw = cfg.raw
    scale = float(raw.get("slot_scale", 1.0))
    try:
        graph = validate_graph(_graph_mapping(raw))
        services = []
        for s in raw["services"]:
            fns = s.get("functions", ())
            services.append(ServiceChain(
                name=s["name"], destination=str(s["destination"]),
                lifetime=_service_lifetime(s, graph, raw["arrivals"], scale),
                reliability=float(s["reliability"]),
                scaling=tuple(float(f["scaling"]) for f in fns),
                workload=tuple(float(f["workload"]) for f in fns)))
        net = build_layered_network(graph, services)
        index = {s.name: c for c, s in enumerate(services)}
        entries = []
        for a in raw["arrivals"]:
            c = index[a["service"]]
            svc = services[c]
            stage = int(a.get("stage", 1))
            life = svc.lifetime if "lifetime" not in a else min(
                svc.lifetime, max(1, math.ceil(a["lifetime"] / scale)))
            entries.append(ArrivalEntry(
                node=net.node_of(c, str(a["node"]), stage), lifetime=life, kind=a["kind"],
                params=_entry_params(a, cfg.base_dir, scale), commodity=c,
                xi=cumulative_scaling(svc, stage)))
        spec = ArrivalSpec(tuple(entries), net.num_nodes, net.max_lifetime, len(services))
    except (GraphError, ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    return Experiment(net, spec, cfg)


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one sweep axis set to ``value``.

    ``lifetime_slack`` switches every service to an automatic lifetime with
    that slack; ``lambda`` multiplies every arrival rate; ``slot_scale``
    stretches the slot (capacities and rates scale up, lifetimes in slots
    shrink).
    """
    name = AXIS_ALIASES.get(axis.lower())
    if name is None:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    raw = copy.deepcopy(cfg.raw)
    if name == "V":
        raw["V"] = float(value)
    elif name == "lifetime_slack":
        if int(value) != value or value < 0:
            raise ConfigError("lifetime_slack values must be nonnegative integers")
        for s in raw["services"]:
            s["lifetime"] = "auto"
            s["lifetime_slack"] = int(value)
    elif name == "slot_scale":
        raw["slot_scale"] = float(value)
    else:
        for a in raw["arrivals"]:
            for key in ("lam", "value", "a_max"):
                if key in a:
                    a[key] = a[key] * float(value)
            if "values" in a:
                a["values"] = [v * float(value) for v in a["values"]]
            if "n" in a and "lam" not in a:
                a["n"] = int(round(a["n"] * float(value)))
    return from_mapping(raw, cfg.base_dir)


def bundled_config_path(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``illustrative``."""
    from importlib import resources

    base = resources.files("rcnc") / "configs"
    path = Path(str(base / (name if name.endswith(".json") else name + ".json")))
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
