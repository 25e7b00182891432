"""Run configuration: JSON files, schema validation and object construction."""

from __future__ import annotations

import copy
import json
import math
import re
from importlib import resources

import jsonschema

from . import apoptosis, ensemble, linsys, models, propagator
from .errors import ConfigurationError

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int_pos = {"type": "integer", "minimum": 1}


def _section(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SPIN_BOSON = _section({
    "type": {"const": "spin_boson"},
    "Delta": _num, "alpha": {"type": "number", "minimum": 0}, "s": _pos,
    "omega_c": _pos, "N": _int_pos,
}, required=["type"])

HOLSTEIN = _section({
    "type": {"const": "holstein"},
    "N": {"type": "integer", "minimum": 2, "multipleOf": 2},
    "J": _num, "omega0": _pos, "W": {"type": "number", "minimum": 0},
    "coupling": {"enum": ["constant", "spectral"]},
    "g": _num, "S": {"type": "number", "minimum": 0},
    "normalize_coupling": {"type": "boolean"},
}, required=["type"])

SCHEMA = _section({
    "name": {"type": "string"},
    "model": {
        "type": "object",
        "required": ["type"],
        "properties": {"type": {"enum": ["spin_boson", "holstein"]}},
        "allOf": [
            {"if": {"properties": {"type": {"const": "spin_boson"}}}, "then": SPIN_BOSON},
            {"if": {"properties": {"type": {"const": "holstein"}}}, "then": HOLSTEIN},
        ],
    },
    "M": _int_pos,
    "seed": {"type": "integer", "minimum": 0},
    "initial": _section({"noise": _pos, "grid_spacing": _pos}),
    "integrator": _section({"rtol": _pos, "atol": _pos, "initial_step": _pos,
                            "max_step": _pos, "min_step": _pos, "t_final": _pos}),
    "apoptosis": _section({"epsilon": _pos, "enabled": {"type": "boolean"},
                           "representative_rule": {"enum": list(apoptosis.REPRESENTATIVE_RULES)}}),
    "regularization": _section({"eps_rho": {"type": "number", "minimum": 0},
                                "mode": {"enum": ["exp", "identity", "none"]}}),
    "solver": _section({"route": {"enum": list(linsys.ROUTES)},
                        "symmetry": {"enum": list(propagator.SYMMETRY_MODES)}}),
    "output": _section({"directory": {"type": "string"}, "output_points": {"type": "integer",
                                                                           "minimum": 2},
                        "checkpoint_period": {"type": ["number", "null"], "exclusiveMinimum": 0}}),
    "spectrum": _section({"damping": {"type": ["number", "null"], "exclusiveMinimum": 0},
                          "pad": _int_pos}),
}, required=["model", "M"])

DEFAULTS = {
    "seed": 0,
    "initial": {"noise": 1e-6, "grid_spacing": 1.0},
    "integrator": {"rtol": 1e-8, "atol": 1e-10, "initial_step": 1e-3, "max_step": 0.5,
                   "min_step": 1e-9, "t_final": 50.0},
    "apoptosis": {"epsilon": 0.05, "enabled": True,
                  "representative_rule": "largest-coefficient-norm"},
    "regularization": {"eps_rho": 1e-8, "mode": "exp"},
    "solver": {"route": "auto", "symmetry": "none"},
    "output": {"directory": "run", "output_points": 501, "checkpoint_period": None},
    "spectrum": {"damping": None, "pad": 8},
}

PRESETS = ("fig1", "fig2", "fig3", "fig4")


def _reject_constant(name):
    raise ConfigurationError(f"non-finite number {name} is not allowed")


def _key_line(text, path):
    """Best-effort line number of the entry at ``path`` in JSON ``text``."""
    pos, line = 0, None
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if m is None:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def parse(text, source="<config>"):
    """Parse and validate configuration text; returns the raw dict."""
    try:
        data = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    validate(data, source, text)
    return data


def validate(data, source="<config>", text=None):
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(data),
                    key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        line = _key_line(text, path) if text else None
        where = f"{source}:{line}" if line else source
        dotted = ".".join(str(p) for p in path) or "<root>"
        raise ConfigurationError(f"{where}: {dotted}: {err.message}")
    _check_finite(data, [])


def _check_finite(obj, path):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, path + [k])
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise ConfigurationError(f"{'.'.join(map(str, path))}: value must be finite")


def load(path):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), str(path))


def load_preset(name):
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("multid2.presets").joinpath(f"{name}.json").read_text("utf-8")
    return parse(text, f"preset {name}")


def apply_overrides(data, overrides):
    """Set ``a.b.c=value`` entries; values are parsed as JSON when possible."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw, parse_constant=_reject_constant)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    validate(data, "overrides")
    return data


def resolved(data):
    """Configuration with every default filled in."""
    out = copy.deepcopy(data)
    for section, values in DEFAULTS.items():
        if isinstance(values, dict):
            merged = dict(values)
            merged.update(out.get(section, {}))
            out[section] = merged
        else:
            out.setdefault(section, values)
    return out


# ---------------------------------------------------------------------------
# object construction


def build_model(cfg):
    m = dict(cfg["model"])
    kind = m.pop("type")
    if kind == "spin_boson":
        return models.spin_boson_spec(models.SpinBosonParams(**m))
    rename = {"J": "J_hop", "S": "S_HR"}
    return models.holstein_spec(models.HolsteinParams(**{rename.get(k, k): v for k, v in m.items()}))


def build_initial_state(cfg, model):
    cfg = resolved(cfg)
    return ensemble.build_initial_state(model, cfg["M"], noise=cfg["initial"]["noise"],
                                        grid_spacing=cfg["initial"]["grid_spacing"],
                                        seed=cfg["seed"], epsilon=cfg["apoptosis"]["epsilon"])


def build_run_objects(cfg):
    """``(integrator, policy, options)`` from a configuration."""
    cfg = resolved(cfg)
    integ = propagator.IntegratorConfig(output_points=cfg["output"]["output_points"],
                                        **cfg["integrator"])
    policy = apoptosis.ApoptosisPolicy(**cfg["apoptosis"])
    options = propagator.SolverOptions(eps_rho=cfg["regularization"]["eps_rho"],
                                       reg_mode=cfg["regularization"]["mode"],
                                       **cfg["solver"])
    return integ, policy, options
