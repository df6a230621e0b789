"""Benchmark configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from .evaluation import DEFAULT_ALIGN_FRACTION, DEFAULT_MAX_DT, DEFAULT_SEGMENT_LEN
from .validation import ConfigError

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_XY = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}


def _obj(properties: dict, required=()) -> dict:
    return {
        "type": "object",
        "properties": properties,
        "additionalProperties": False,
        "required": list(required),
    }


ROCK_SCHEMA = _obj(
    {
        "density": _NONNEG,
        "diameter_min": _POS,
        "diameter_max": _POS,
        "shape_irregularity": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer"},
    },
    required=("density", "diameter_min", "diameter_max"),
)

SCHEMA = _obj(
    {
        "terrain": _obj(
            {
                "raster": {"type": ["string", "null"]},
                "cell_size": _POS,
                "z_scale": {"type": "number"},
                "rocks": {"type": "array", "items": ROCK_SCHEMA},
            }
        ),
        "path": _obj(
            {
                "waypoints": {"type": ["array", "null"], "items": _XY},
                "closed": {"type": "boolean"},
                "speed": _POS,
                "sample_rate": _POS,
                "height_offset": {"type": "number"},
                "turn_rate": {"anyOf": [_POS, {"type": "null"}]},
                "orientation_noise_deg": _NONNEG,
            }
        ),
        "sensor": _obj(
            {
                "type": {"enum": ["lidar", "stereo"]},
                "preset": {"type": "string"},
                "az_fov": _POS,
                "el_fov": _POS,
                "az_res": _POS,
                "el_res": _POS,
                "max_range": _POS,
                "rate": _POS,
                "range_noise_sigma": _NONNEG,
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "h_fov": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
                "v_fov": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
                "baseline": _POS,
            }
        ),
        "odometry": _obj(
            {
                "voxel": _POS,
                "max_corr_dist": _POS,
                "max_iter": {"type": "integer", "minimum": 1},
                "tol": _POS,
                "normal_radius": _POS,
                "min_neighbors": {"type": "integer", "minimum": 3},
                "map_frames": {"type": "integer", "minimum": 0},
                "map_voxel": _POS,
                "keyframe_dist": _NONNEG,
                "keyframe_angle": _NONNEG,
            }
        ),
        "eval": _obj(
            {
                "segment_len": _POS,
                "align_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_dt": _POS,
                "gt": {"type": ["string", "null"]},
                "est": {"type": ["string", "null"]},
            }
        ),
        "seed": {"type": "integer"},
        "out_dir": {"type": "string"},
    }
)

DEFAULTS: dict = {
    "terrain": {
        "raster": None,
        "cell_size": 0.5,
        "z_scale": 4.0,
        "rocks": [
            {"density": 1.0, "diameter_min": 0.1, "diameter_max": 0.5, "shape_irregularity": 0.4, "seed": 0},
            {"density": 0.02, "diameter_min": 1.0, "diameter_max": 2.5, "shape_irregularity": 0.4, "seed": 1},
        ],
    },
    "path": {
        "waypoints": None,
        "closed": True,
        "speed": 1.0,
        "sample_rate": 10.0,
        "height_offset": 1.0,
        "turn_rate": 30.0,
        "orientation_noise_deg": 0.0,
    },
    "sensor": {"type": "lidar", "preset": "default"},
    "odometry": {
        "voxel": 0.2,
        "max_corr_dist": 0.5,
        "max_iter": 30,
        "tol": 1e-6,
        "normal_radius": 1.0,
        "min_neighbors": 5,
        "map_frames": 10,
        "map_voxel": 0.1,
        "keyframe_dist": 0.3,
        "keyframe_angle": 3.0,
    },
    "eval": {
        "segment_len": DEFAULT_SEGMENT_LEN,
        "align_fraction": DEFAULT_ALIGN_FRACTION,
        "max_dt": DEFAULT_MAX_DT,
        "gt": None,
        "est": None,
    },
    "seed": 0,
    "out_dir": "run",
}


def demo_raster_path() -> Path:
    return Path(str(resources.files("roverbench") / "data" / "demo_dtm.png"))


def demo_config_path() -> Path:
    return Path(str(resources.files("roverbench") / "data" / "demo_config.json"))


def _pointer(path) -> str:
    return "".join(f"/{str(p).replace('~', '~0').replace('/', '~1')}" for p in path)


def _merge(defaults: dict, overrides: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class BenchConfig:
    """Validated configuration; ``data`` holds the full document with defaults."""

    data: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.data[key]

    @property
    def terrain(self) -> dict:
        return self.data["terrain"]

    @property
    def path(self) -> dict:
        return self.data["path"]

    @property
    def sensor(self) -> dict:
        return self.data["sensor"]

    @property
    def odometry(self) -> dict:
        return self.data["odometry"]

    @property
    def eval(self) -> dict:
        return self.data["eval"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def raster_path(self) -> Path:
        return self.resolve(self.terrain["raster"]) or demo_raster_path()

    @property
    def hash(self) -> str:
        data = {k: v for k, v in self.data.items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def validate_config(document, base_dir=".") -> BenchConfig:
    """Validate a config document and fill in defaults.

    Raises :class:`ConfigError` carrying the JSON pointer of the offending
    field.
    """
    if not isinstance(document, dict):
        raise ConfigError("configuration must be a JSON object")
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(document), key=lambda e: ([str(p) for p in e.absolute_path], e.message))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            if extra:
                path = path + [extra[0]]
                raise ConfigError(f"unknown key {extra[0]!r}", _pointer(path))
        raise ConfigError(err.message, _pointer(path))
    data = _merge(DEFAULTS, document)
    cfg = BenchConfig(data, Path(base_dir))

    rocks = data["terrain"]["rocks"]
    for k, rock in enumerate(rocks):
        if rock["diameter_min"] > rock["diameter_max"]:
            raise ConfigError("diameter_min exceeds diameter_max", f"/terrain/rocks/{k}/diameter_min")
    wp = data["path"]["waypoints"]
    if wp is not None and len(wp) < (3 if data["path"]["closed"] else 2):
        raise ConfigError("too few waypoints", "/path/waypoints")
    if data["terrain"]["raster"] is not None and not cfg.raster_path.is_file():
        raise ConfigError(f"file not found: {cfg.raster_path}", "/terrain/raster")
    for key in ("gt", "est"):
        ref = data["eval"][key]
        if ref is not None and not cfg.resolve(ref).is_file():
            raise ConfigError(f"file not found: {cfg.resolve(ref)}", f"/eval/{key}")
    # build the sensor model early so preset names and ranges are checked here
    from .pipeline import sensor_model

    try:
        sensor_model(cfg)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc).strip("'\""), "/sensor") from None
    return cfg


def load_config(path) -> BenchConfig:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return validate_config(document, base_dir=path.parent)
