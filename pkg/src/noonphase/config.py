"""Run configuration: JSON documents validated against ``config_schema.json``.

The schema file is the reference for every field and its default.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .frames import DetectorGeometry
from .pairgen import DetectorNoiseParams, PairSourceParams, SceneConfig
from .scenes import make_phase


def schema() -> dict:
    text = resources.files("noonphase").joinpath("config_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _fill_defaults(node: dict, sch: dict) -> dict:
    for key, sub in sch.get("properties", {}).items():
        if key not in node and "default" in sub:
            node[key] = copy.deepcopy(sub["default"])
        if isinstance(node.get(key), dict) and sub.get("type") == "object":
            _fill_defaults(node[key], sub)
    return node


def _field_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def load_config(source=None) -> dict:
    """Validate a config (path, dict or ``None`` for all defaults) and fill defaults.

    Raises :class:`ConfigError` listing every violation with its field path.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    sch = schema()
    validator = jsonschema.Draft202012Validator(sch)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{_field_path(e)}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    cfg = _fill_defaults(raw, sch)
    src = cfg["source"]
    if src["sigma_minus"] >= src["sigma_plus"]:
        raise ConfigError("source/sigma_minus: must be smaller than source/sigma_plus")
    return cfg


@dataclass
class RunSetup:
    """Typed objects built from a validated config."""

    geometry: DetectorGeometry
    source: PairSourceParams
    noise: DetectorNoiseParams
    scene: SceneConfig
    background_scene: SceneConfig | None


def build(cfg: dict) -> RunSetup:
    g = cfg["geometry"]
    geometry = DetectorGeometry(g["width"], g["height"], float(g["pixel_pitch"]))
    source = PairSourceParams(**{k: float(v) for k, v in cfg["source"].items()})
    n = cfg["noise"]
    kernel = {(int(e["dx"]), int(e["dy"])): float(e["p"]) for e in n["crosstalk"]}
    noise = DetectorNoiseParams(float(n["efficiency"]), float(n["dark_prob"]), kernel)
    s = cfg["scene"]
    sample = make_phase(s["sample_phase"], geometry.half_shape)
    background = None if s["background_phase"] is None else make_phase(s["background_phase"], geometry.half_shape)
    scene = SceneConfig(sample, s["mode"], 0.0, float(s["shear"]), background)
    background_scene = None
    if background is not None:
        background_scene = SceneConfig(sample * 0.0, s["mode"], 0.0, float(s["shear"]), background)
    return RunSetup(geometry, source, noise, scene, background_scene)
