"""Experiment configuration: YAML document, JSON-schema validation, dataclass overrides."""
from __future__ import annotations

import copy
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import jsonschema
import yaml

from .mapping import MapperParams, noise_free_mapper
from .navigation import NavParams
from .scenario import SimConfig
from .stack import StackConfig, noise_free_stack
from .world import DATA_DIR, LAB_WORLD_PATH, WorldModel, load_world

DEFAULT_CONFIG_PATH = os.path.join(DATA_DIR, "default_config.yaml")
SCHEMA_PATH = os.path.join(DATA_DIR, "config_schema.json")


class ConfigError(ValueError):
    pass


def load_defaults():
    with open(DEFAULT_CONFIG_PATH) as f:
        return yaml.safe_load(f)


def load_schema():
    with open(SCHEMA_PATH) as f:
        return json.load(f)


def deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text):
    """``a.b.c=value`` into a nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r} has an empty key")
    value = yaml.safe_load(raw)
    d = value
    for p in reversed(parts):
        d = {p: d}
    return d


def apply_overrides(obj, overrides, path=""):
    """Recursively ``dataclasses.replace`` a frozen dataclass from a nested dict."""
    if not overrides:
        return obj
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for k, v in overrides.items():
        where = f"{path}.{k}" if path else k
        if k not in names:
            raise ConfigError(f"unknown configuration key {where!r}")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            changes[k] = apply_overrides(cur, v, where)
        elif isinstance(cur, tuple):
            changes[k] = tuple(v)
        elif isinstance(cur, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where!r} must be a boolean")
            changes[k] = v
        elif isinstance(cur, int) and not isinstance(cur, bool):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{where!r} must be an integer")
            changes[k] = v
        elif isinstance(cur, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where!r} must be a number")
            changes[k] = float(v)
        else:
            changes[k] = v
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or 'config'}: {err}") from err


def _sim_overrides(d):
    d = copy.deepcopy(d or {})
    lidar = d.get("lidar") or {}
    if "beam_count" in lidar and "angular_step" not in lidar:
        lidar["angular_step"] = 2.0 * math.pi / int(lidar["beam_count"])
    return d


@dataclass
class ExperimentConfig:
    raw: dict
    world_path: str
    world: WorldModel
    seeds: list
    output_dir: str
    estimators: list
    sim: SimConfig
    stack: StackConfig
    mapper: MapperParams
    navigator: NavParams
    sections: dict = field(default_factory=dict)

    @property
    def noise_free(self):
        return bool(self.raw.get("noise_free"))

    def section(self, name):
        return self.sections[name]


def build_config(doc: dict, check_output=True) -> ExperimentConfig:
    """Validate a full (already merged) document and build every parameter object.

    Everything that can fail does so here, before any simulation runs.
    """
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as err:
        loc = ".".join(str(p) for p in err.absolute_path) or "config"
        raise ConfigError(f"{loc}: {err.message}") from err
    world_path = doc.get("world") or LAB_WORLD_PATH
    if not os.path.isfile(world_path):
        raise ConfigError(f"world file {world_path!r} does not exist")
    try:
        world = load_world(world_path)
    except Exception as err:
        raise ConfigError(f"world file {world_path!r} does not parse: {err}") from err
    sim = apply_overrides(SimConfig(), _sim_overrides(doc.get("sim")), "sim")
    stack = apply_overrides(StackConfig(), doc.get("stack"), "stack")
    if doc.get("noise_free"):
        sim = sim.noise_free()
        stack = noise_free_stack(stack)
    mapper = apply_overrides(MapperParams(), doc.get("mapper"), "mapper")
    if doc.get("noise_free"):
        mapper = noise_free_mapper(mapper)
    mapper = dataclasses.replace(mapper, camera=sim.camera, camera_height=sim.camera_height, vlp=stack.vlp)
    stack = dataclasses.replace(stack, camera=sim.camera, camera_height=sim.camera_height)
    nav = apply_overrides(NavParams(), doc.get("navigator"), "navigator")
    nav = dataclasses.replace(nav, robot_radius=sim.robot_radius)
    try:
        world.check_camera_height(sim.camera_height)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    out = doc["output_dir"]
    if check_output:
        check_output_dir(out)
    sections = {k: doc.get(k) or {} for k in ("static_accuracy", "trajectory", "mapping", "recovery", "navigation")}
    return ExperimentConfig(doc, world_path, world, list(doc["seeds"]), out, list(doc["estimators"]),
                            sim, stack, mapper, nav, sections)


def check_output_dir(path):
    """Create ``path`` if needed and prove it is writable."""
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "w") as f:
            f.write("")
        os.remove(probe)
    except OSError as err:
        raise ConfigError(f"output directory {path!r} is not writable: {err}") from err


def load_config(path=None, overrides=(), check_output=True) -> ExperimentConfig:
    doc = load_defaults()
    if path is not None:
        try:
            with open(path) as f:
                user = yaml.safe_load(f) or {}
        except OSError as err:
            raise ConfigError(f"cannot read config {path!r}: {err}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"config {path!r} does not parse: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError("config document must be a mapping")
        if user.get("world") and not os.path.isabs(user["world"]):
            user["world"] = os.path.join(os.path.dirname(os.path.abspath(path)), user["world"])
        doc = deep_merge(doc, user)
    for o in overrides:
        doc = deep_merge(doc, parse_override(o) if isinstance(o, str) else o)
    return build_config(doc, check_output)
