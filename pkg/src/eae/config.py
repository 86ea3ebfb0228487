"""Experiment configuration: JSON schema, defaults and resolution."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

TRAINERS = ("eae", "vae", "ae")
DATASET_KINDS = ("gaussian_mixture", "oscillator", "lambda_omega", "correlated_gaussian", "idx")

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "kind": "gaussian_mixture",
        "options": {},
        "split": [0.8, 0.1, 0.1],
        "cache": True,
    },
    "model": {
        "latent_dim": 2,
        "encoder_hidden": [],
        "decoder_hidden": [],
        "activation": "elu",
        "latent_bias": True,
    },
    "trainer": {
        "kind": "eae",
        "loss": "squared_error",
        "ensemble_size": 10,
        "batch_size": 32,
        "tolerance": 0.0,
        "max_outer_iterations": 100,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "burn_in_discard": 0,
        "epochs": 10,
        "max_steps": None,
        "checkpoint_every": 0,
    },
    "thermostat": {
        "temperature": 1e-4,
        "mass": 1.0,
        "dt": 0.1,
        "chain_length": 4,
        "chain_mass": None,
        "velocity_resample_period": 0,
        "seed": None,
    },
    "diagnostics": {
        "activity_threshold": 0.01,
        "ensemble_samples": 0,
        "interpolation_pairs": [],
        "interpolation_points": 11,
        "kde_points": 256,
    },
    "dynamics": {
        "enabled": False,
        "weights": [1.0, 20.0],
        "max_degree": 3,
        "sines": True,
        "integrate_dt": 0.01,
        "integrate_steps": 1000,
    },
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int0 = {"type": "integer", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "eae experiment configuration",
    **_obj({
        "seed": _int0,
        "output_dir": {"type": "string", "minLength": 1},
        "dataset": _obj({
            "kind": {"enum": list(DATASET_KINDS)},
            "options": {"type": "object"},
            "split": {"type": "array", "items": _nonneg, "minItems": 3, "maxItems": 3},
            "cache": {"type": "boolean"},
        }),
        "model": _obj({
            "latent_dim": _int1,
            "encoder_hidden": {"type": "array", "items": _int1},
            "decoder_hidden": {"type": "array", "items": _int1},
            "activation": {"enum": ["linear", "relu", "elu", "sigmoid"]},
            "latent_bias": {"type": "boolean"},
        }),
        "trainer": _obj({
            "kind": {"enum": list(TRAINERS)},
            "loss": {"enum": ["squared_error", "bernoulli_cross_entropy_with_sigmoid"]},
            "ensemble_size": _int1,
            "batch_size": _int1,
            "tolerance": _nonneg,
            "max_outer_iterations": _int0,
            "lr": _pos,
            "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "adam_eps": _pos,
            "burn_in_discard": _int0,
            "epochs": _int1,
            "max_steps": {"type": ["integer", "null"], "minimum": 0},
            "checkpoint_every": _int0,
        }),
        "thermostat": _obj({
            "temperature": _pos,
            "mass": _pos,
            "dt": _pos,
            "chain_length": _int1,
            "chain_mass": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "velocity_resample_period": _int0,
            "seed": {"type": ["integer", "null"], "minimum": 0},
        }),
        "diagnostics": _obj({
            "activity_threshold": _nonneg,
            "ensemble_samples": _int0,
            "interpolation_pairs": {
                "type": "array",
                "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
            },
            "interpolation_points": {"type": "integer", "minimum": 2},
            "kde_points": {"type": "integer", "minimum": 2},
        }),
        "dynamics": _obj({
            "enabled": {"type": "boolean"},
            "weights": {"type": "array", "items": _nonneg, "minItems": 2, "maxItems": 2},
            "max_degree": _int1,
            "sines": {"type": "boolean"},
            "integrate_dt": _pos,
            "integrate_steps": _int0,
        }),
    }),
}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "options":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def resolve(doc: dict, seed: int | None = None, output_dir: str | None = None) -> dict:
    """Validate a user document and expand it with defaults.

    Command-line ``seed`` / ``output_dir`` override the document. A null
    thermostat seed inherits the run seed.
    """
    validate(doc)
    cfg = _merge(DEFAULTS, doc)
    if seed is not None:
        cfg["seed"] = int(seed)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    if cfg["thermostat"]["seed"] is None:
        cfg["thermostat"]["seed"] = cfg["seed"]
    if abs(sum(cfg["dataset"]["split"]) - 1.0) > 1e-9:
        raise ConfigError("config error at dataset/split: fractions must sum to 1")
    if cfg["trainer"]["burn_in_discard"] >= cfg["trainer"]["ensemble_size"]:
        raise ConfigError("config error at trainer/burn_in_discard: must be below ensemble_size")
    if cfg["dynamics"]["enabled"] and cfg["trainer"]["kind"] != "eae":
        raise ConfigError("config error at dynamics/enabled: dynamics training requires the eae trainer")
    validate(cfg)
    return cfg


def load(path, seed=None, output_dir=None) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(doc, seed, output_dir)


def dump(cfg: dict, path):
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def shipped_configs_dir() -> Path:
    return Path(__file__).parent / "configs"


def shipped_configs() -> dict[str, Path]:
    return {p.name: p for p in sorted(shipped_configs_dir().glob("*.json"))}
