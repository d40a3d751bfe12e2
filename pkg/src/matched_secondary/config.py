"""Analysis and simulation configuration files (YAML, validated against a JSON Schema)."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import yaml

from .exceptions import InvalidInputError

CONFIG_DIR_ENV = "MATCHED_SECONDARY_CONFIG_DIR"
METHODS = ("conditional", "unadjusted", "adjusted1", "adjusted2", "adjusted3", "PM1", "PM2", "PM3")
DERIVE_OPS = (">", ">=", "<", "<=", "==", "!=", "in")

_RULE_SCHEMA = {
    "type": "object",
    "required": ["name", "column", "op", "value"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "column": {"type": "string", "minLength": 1},
        "op": {"enum": list(DERIVE_OPS)},
        "value": {},
    },
}

ANALYSIS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "matched-secondary analysis",
    "type": "object",
    "required": ["input", "disease", "outcome", "covariates", "matching"],
    "additionalProperties": False,
    "properties": {
        "input": {"type": "string"},
        "disease": {"type": "string"},
        "outcome": {"type": "string"},
        "covariates": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "matching": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "derive": {"type": "array", "items": _RULE_SCHEMA},
        "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1, "uniqueItems": True},
        "rates": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "init": {"enum": ["naive-warm-start", "zeros"]},
        "output": {"type": ["string", "null"]},
        "format": {"enum": ["json", "text"]},
    },
}

SIMULATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "matched-secondary simulation",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_pop": {"type": "integer", "minimum": 1},
        "stratum_split": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "beta0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "beta1": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "gamma1": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "gamma2": {"type": "number"},
        "disease_rate": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "gamma0": {"type": ["array", "null"], "items": {"type": "number"}},
        "n_cases": {"type": "integer", "minimum": 1},
        "n_controls": {"type": "integer", "minimum": 1},
        "n_replicates": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
}


@dataclass(frozen=True)
class DeriveRule:
    """Binary column ``name`` = ``column <op> value`` (missing stays missing)."""

    name: str
    column: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in DERIVE_OPS:
            raise InvalidInputError(f"unknown operator {self.op!r}; choose from {DERIVE_OPS}")
        if self.op == "in":
            if not isinstance(self.value, (list, tuple)):
                raise InvalidInputError(f"rule {self.name!r}: 'in' needs a list of values")
        elif isinstance(self.value, (int, float)) and not isinstance(self.value, bool):
            if not math.isfinite(self.value):
                raise InvalidInputError(f"rule {self.name!r}: threshold must be finite")
        elif self.op not in ("==", "!="):
            raise InvalidInputError(f"rule {self.name!r}: operator {self.op!r} needs a numeric threshold")


@dataclass(frozen=True)
class AnalysisConfig:
    """Column mapping, derived variables and method selection for ``fit``."""

    input: str
    disease: str
    outcome: str
    covariates: tuple
    matching: tuple
    derive: tuple = ()
    methods: tuple = METHODS
    rates: Optional[tuple] = None
    init: str = "naive-warm-start"
    output: Optional[str] = None
    format: str = "json"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "matching", tuple(self.matching))
        object.__setattr__(self, "methods", tuple(self.methods))
        rules = tuple(r if isinstance(r, DeriveRule) else DeriveRule(**r) for r in self.derive)
        object.__setattr__(self, "derive", rules)
        if self.rates is not None:
            object.__setattr__(self, "rates", tuple(float(v) for v in self.rates))
        validate_analysis(self.to_dict())
        if "PM2" in self.methods and self.rates is None:
            raise InvalidInputError("PM2 needs known stratum disease rates ('rates')")

    def to_dict(self):
        out = asdict(self)
        out["covariates"] = list(self.covariates)
        out["matching"] = list(self.matching)
        out["methods"] = list(self.methods)
        out["derive"] = [asdict(r) for r in self.derive]
        out["rates"] = None if self.rates is None else list(self.rates)
        return out

    @classmethod
    def from_dict(cls, values, base_dir=None):
        validate_analysis(values)
        values = dict(values)
        if base_dir is not None and not os.path.isabs(values["input"]):
            values["input"] = str(Path(base_dir) / values["input"])
        return cls(**values)


def _validate(values, schema, what):
    try:
        jsonschema.validate(values, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InvalidInputError(f"invalid {what} configuration at {where}: {exc.message}") from None


def validate_analysis(values):
    _validate(values, ANALYSIS_SCHEMA, "analysis")


def validate_simulation(values):
    _validate(values, SIMULATION_SCHEMA, "simulation")


def config_dir():
    """Directory searched for relative config paths (``$MATCHED_SECONDARY_CONFIG_DIR`` or the cwd)."""
    return Path(os.environ.get(CONFIG_DIR_ENV, "."))


def resolve_config_path(path):
    """Return ``path`` if it exists, else the same name inside :func:`config_dir`."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    candidate = config_dir() / p
    return candidate if candidate.exists() else p


def load_yaml(path):
    p = resolve_config_path(path)
    try:
        with open(p, encoding="utf-8") as fh:
            values = yaml.safe_load(fh)
    except FileNotFoundError:
        raise InvalidInputError(f"config file not found: {path} (also looked in ${CONFIG_DIR_ENV})") from None
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"config file {p} is not valid YAML: {exc}") from None
    if not isinstance(values, dict):
        raise InvalidInputError(f"config file {p} must hold a mapping")
    return values, p


def load_analysis_config(path):
    """Read an analysis config; a relative ``input`` is taken relative to the config file."""
    values, p = load_yaml(path)
    return AnalysisConfig.from_dict(values, base_dir=p.parent)


def load_simulation_settings(path):
    """Read simulation settings as a validated dict suitable for ``SimConfig.from_dict``."""
    values, _ = load_yaml(path)
    validate_simulation(values)
    return values
