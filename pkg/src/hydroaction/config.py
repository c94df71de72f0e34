"""JSON experiment configuration: schema, presets, defaults and scenario construction."""

from __future__ import annotations

import copy
import json

import jsonschema

from .errors import ConfigError
from .lattice import Envelope, FourierSeries, LatticeModel, Potential

_NUMBER = {"type": "number"}
_FOURIER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "constant": _NUMBER,
        "modes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["k"],
                "properties": {
                    "k": {"oneOf": [{"type": "integer"}, {"type": "array", "items": {"type": "integer"}}]},
                    "cos": _NUMBER,
                    "sin": _NUMBER,
                },
            },
        },
    },
}
_ENVELOPE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["constant", "polynomial", "cosine"]},
        "value": _NUMBER,
        "coeffs": {"type": "array", "items": _NUMBER},
        "amplitude": _NUMBER,
        "omega": _NUMBER,
        "phase": _NUMBER,
        "offset": _NUMBER,
    },
}


def _block(props, required=()):
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


SCHEMA = _block({
    "model": _block({
        "kind": {"enum": ["zrp", "sep"]},
        "g": {"oneOf": [{"const": "linear"}, {"type": "array", "items": {"type": "number"}, "minItems": 1}]},
        "N_max": {"type": ["integer", "null"]},
    }),
    "lattice": _block({
        "d": {"type": "integer", "minimum": 1, "maximum": 2},
        "L": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
    }),
    "potential": _block({"V": _FOURIER, "H": _FOURIER, "envelope": _ENVELOPE}),
    "profile": _FOURIER,
    "time": _block({
        "T": {"type": "number", "exclusiveMinimum": 0},
        "n_times": {"type": "integer", "minimum": 5},
    }),
    "engine": _block({
        "mode": {"enum": ["auto", "exact", "kmc"]},
        "n_traj": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "state_cap": {"type": "number", "exclusiveMinimum": 0},
        "n_snapshots": {"type": "integer", "minimum": 1},
        "eps": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5}, "minItems": 1},
    }),
    "grid": _block({"M": {"type": "integer", "minimum": 8}}),
    "tolerance": _block({
        "ode_tol": {"type": "number", "exclusiveMinimum": 0},
        "quad_tol": {"type": "number", "exclusiveMinimum": 0},
        "elliptic_tol": {"type": "number", "exclusiveMinimum": 0},
    }),
    "output": _block({
        "directory": {"type": "string"},
        "formats": {"type": "array", "items": {"enum": ["csv", "json"]}, "minItems": 1},
    }),
})

DEFAULTS = {
    "model": {"kind": "zrp", "g": "linear", "N_max": None},
    "lattice": {"d": 1, "L": [4, 6, 8]},
    "potential": {
        "V": {"constant": 0.0, "modes": []},
        "H": {"constant": 0.0, "modes": [{"k": 1, "cos": 0.2, "sin": 0.0}]},
        "envelope": {"kind": "constant", "value": 1.0},
    },
    "profile": {"constant": 1.0, "modes": [{"k": 1, "cos": 0.5, "sin": 0.0}]},
    "time": {"T": 0.05, "n_times": 401},
    "engine": {"mode": "auto", "n_traj": 10000, "seed": 0, "state_cap": 2e6, "n_snapshots": 20,
               "eps": [0.125, 0.25]},
    "grid": {"M": 256},
    "tolerance": {"ode_tol": 1e-10, "quad_tol": 1e-8, "elliptic_tol": 1e-12},
    "output": {"directory": "out", "formats": ["csv", "json"]},
}

PRESETS = {
    "zrp-linear": {},
    "sep": {
        "model": {"kind": "sep", "g": "linear", "N_max": 1},
        "lattice": {"d": 1, "L": [4, 6, 8, 10]},
        "potential": {
            "V": {"constant": 0.0, "modes": [{"k": 1, "cos": 0.3, "sin": 0.0}]},
            "H": {"constant": 0.0, "modes": [{"k": 1, "cos": 0.2, "sin": 0.0}]},
            "envelope": {"kind": "constant", "value": 1.0},
        },
        "profile": {"constant": 0.5, "modes": [{"k": 1, "cos": 0.2, "sin": 0.0}]},
    },
}


def _merge(base, update):
    out = copy.deepcopy(base)
    for key, val in update.items():
        # Fourier blocks and the envelope are replaced as a whole
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key not in ("V", "H", "envelope", "profile"):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _pointer(path):
    return "/" + "/".join(str(p) for p in path) if path else "/"


def validate_document(doc):
    """Raise :class:`ConfigError` (with a JSON pointer) on schema violations."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            if extra:
                path = path + [extra[0]]
                raise ConfigError(f"unknown key {extra[0]!r}", _pointer(path))
        raise ConfigError(err.message, _pointer(path))


def _semantic_checks(cfg):
    model = cfg["model"]
    if model["kind"] == "sep":
        if model["N_max"] not in (None, 1):
            raise ConfigError("the exclusion process has N_max = 1", "/model/N_max")
        if model["g"] != "linear":
            raise ConfigError("a rate table only applies to the zero-range process", "/model/g")
    elif model["N_max"] is not None:
        raise ConfigError("the zero-range process has no occupancy bound; use null", "/model/N_max")
    Ls = cfg["lattice"]["L"]
    if Ls != sorted(set(Ls)):
        raise ConfigError("L list must be strictly increasing", "/lattice/L")
    d = cfg["lattice"]["d"]
    for name in ("V", "H"):
        for i, m in enumerate(cfg["potential"][name].get("modes", [])):
            k = m["k"] if isinstance(m["k"], list) else [m["k"]]
            if len(k) != d:
                raise ConfigError(f"wave vector has {len(k)} components, expected {d}",
                                  f"/potential/{name}/modes/{i}/k")
    for i, m in enumerate(cfg["profile"].get("modes", [])):
        k = m["k"] if isinstance(m["k"], list) else [m["k"]]
        if len(k) != d:
            raise ConfigError(f"wave vector has {len(k)} components, expected {d}", f"/profile/modes/{i}/k")


def _materialise(cfg):
    if cfg["model"]["kind"] == "sep":
        cfg["model"]["N_max"] = 1
    for name in ("V", "H"):
        cfg["potential"][name].setdefault("constant", 0.0)
        cfg["potential"][name].setdefault("modes", [])
        for m in cfg["potential"][name]["modes"]:
            m.setdefault("cos", 0.0)
            m.setdefault("sin", 0.0)
    cfg["profile"].setdefault("constant", 0.0)
    cfg["profile"].setdefault("modes", [])
    for m in cfg["profile"]["modes"]:
        m.setdefault("cos", 0.0)
        m.setdefault("sin", 0.0)
    env = Envelope.from_dict(cfg["potential"]["envelope"])
    cfg["potential"]["envelope"] = env.to_dict()
    return cfg


def resolve(doc=None, preset=None):
    """Validated configuration with every default filled in."""
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}", "/preset")
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object", "/")
    validate_document(doc)
    base = _merge(DEFAULTS, PRESETS[preset or "zrp-linear"])
    cfg = _merge(base, doc)
    validate_document(cfg)
    _semantic_checks(cfg)
    return _materialise(cfg)


def load(path=None, preset=None):
    """Read and resolve a JSON file (``None`` gives the preset defaults)."""
    doc = None
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}", "/") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read configuration: {exc}", "/") from exc
    return resolve(doc, preset)


def build_model(cfg):
    m = cfg["model"]
    d = cfg["lattice"]["d"]
    if m["kind"] == "sep":
        return LatticeModel.sep(d)
    return LatticeModel.zrp(m["g"], d)


def build_potential(cfg):
    d = cfg["lattice"]["d"]
    p = cfg["potential"]
    return Potential(
        FourierSeries.from_dict(p["V"], d),
        FourierSeries.from_dict(p["H"], d),
        Envelope.from_dict(p["envelope"]),
    )


def build_profile(cfg):
    return FourierSeries.from_dict(cfg["profile"], cfg["lattice"]["d"])


def build_scenario(cfg):
    from .lab import Scenario

    e = cfg["engine"]
    tol = cfg["tolerance"]
    return Scenario(
        model=build_model(cfg),
        potential=build_potential(cfg),
        rho0=build_profile(cfg),
        T=cfg["time"]["T"],
        L_list=tuple(cfg["lattice"]["L"]),
        engine=e["mode"],
        M=cfg["grid"]["M"],
        n_times=cfg["time"]["n_times"],
        n_traj=e["n_traj"],
        seed=e["seed"],
        state_cap=e["state_cap"],
        ode_tol=tol["ode_tol"],
        quad_tol=tol["quad_tol"],
        elliptic_tol=tol["elliptic_tol"],
        eps_list=tuple(e["eps"]),
        n_snapshots=e["n_snapshots"],
    )
