"""JSON run configuration with dotted command-line overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import DomainError
from .schedule import AnnealSpec, BetaSchedule, Schedule

DEFAULT_TEACHER = {
    "shape": [4, 4, 3],
    "components": [{"weight": 1.0, "std": 0.2, "fill": [0.3, -0.2, 0.5]}],
}

DEFAULTS = {
    "sample2d": {
        "schedule": {"kind": "vp"},
        "teacher": DEFAULT_TEACHER,
        "n_steps": 2000,
        "spacing": "uniform",
        "beta": {"kind": "zero"},
        "method": "euler",
        "guidance": None,
        "condition": None,
    },
    "warp-noise": {
        "scene": {"empty": False},
        "cameras": [{"elevation": 15.0, "azimuth": 0.0}, {"elevation": 15.0, "azimuth": 10.0}],
        "camera": {"radius": 2.5, "fov": 40.0, "height": 32, "width": 32},
        "noise_resolution": 512,
        "channels": 3,
        "gamma": 0.0,
        "reseedings": 64,
        "opacity_threshold": 0.5,
        "bilinear": False,
    },
    "distill": {
        "schedule": {"kind": "vp"},
        "teacher": {
            "shape": [32, 32, 3],
            "components": [{"weight": 0.5, "std": 0.2, "fill": [0.5, 0.5, 0.5]},
                           {"weight": 0.5, "std": 0.2, "fill": [-0.3, -0.3, -0.3]}],
        },
        "anneal": {"t_max": 0.98, "t_min": 0.02, "total_steps": 600, "stages": []},
        "steps": None,
        "gamma": 1e-4,
        "guidance": None,
        "condition": None,
        "orbit": {"radius": 2.5, "elevation_range": [0.0, 30.0], "elevation_count": 3,
                  "azimuth_count": 24, "fov": 40.0},
        "optimizer": {"kind": "adam", "lr": 1e-2, "lr_final": None, "beta1": 0.9, "beta2": 0.99, "eps": 1e-8},
        "modes": ["consistent"],
        "timesteps": "anneal",
        "texture_resolution": 32,
        "noise_resolution": 256,
        "snapshot_every": 0,
    },
    "verify": {
        "schedule": {"kind": "vp"},
    },
}


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``key.sub=value`` assignments; intermediate dicts are created as needed."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise DomainError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise DomainError(f"bad override key {key!r}")
        node = cfg
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise DomainError(f"override {key!r} descends into a non-mapping value")
            node = nxt
        node[parts[-1]] = parse_value(raw)
    return cfg


def load_config(command: str, path=None, overrides=()) -> dict:
    cfg = DEFAULTS.get(command, {})
    if path is not None:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise DomainError("config file must hold a JSON object")
        cfg = deep_merge(cfg, data)
    return apply_overrides(cfg, overrides)


def build_schedule(spec: dict) -> Schedule:
    spec = dict(spec)
    kind = spec.pop("kind", "vp")
    if kind == "vp":
        return Schedule.vp(**spec)
    if kind == "edm":
        return Schedule.edm(**spec)
    if kind == "table":
        return Schedule.from_table(spec["ts"], spec["alphas"], spec["sigmas"])
    raise DomainError(f"unknown schedule kind {kind!r}")


def build_beta(spec: dict) -> BetaSchedule:
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return BetaSchedule.zero()
    if kind == "constant":
        return BetaSchedule.constant(float(spec["b"]))
    if kind == "ddpm":
        return BetaSchedule.ddpm()
    raise DomainError(f"unknown beta kind {kind!r}")


def build_anneal(spec: dict, schedule: Schedule) -> AnnealSpec:
    t_max = float(spec.get("t_max", schedule.T))
    t_min = float(spec.get("t_min", schedule.t_s))
    return AnnealSpec(t_max, t_min, int(spec["total_steps"]), tuple(tuple(s) for s in spec.get("stages") or ()))
