"""Scenario files: schema check, rule compilation and construction of the model objects.

A scenario is a YAML mapping. Every problem found (unknown key, wrong type,
missing run field, violated invariant) is collected with the dotted path of
the offending field before anything is reported.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import yaml

from .dynkin import GameSpec
from .errors import ConfigurationError, DRBSDEError
from .filtration import AzemaBundle, DefaultLaw, LatticeModel, Measure, build_azema, build_model, reweight_to_Q
from .solver import DRBSDEProblem, DriverSpec

RUN_KINDS = ("tree-solve", "penalize", "link-check", "dynkin-oracle", "saddle-verify", "mc-solve", "example-bs")
RULE_KINDS = ("constant", "affine", "call", "step", "nodes")


class ScenarioError(ConfigurationError):
    """All problems found in a scenario, each prefixed by its field path."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# rules


@dataclass(frozen=True)
class Rule:
    """Function of ``(t, b)`` described by a scenario entry."""

    kind: str
    params: tuple

    def __call__(self, t, b):
        if self.kind == "nodes":
            raise ConfigurationError("a nodes rule has values only on the lattice")
        p = dict(self.params)
        t = np.asarray(t, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "constant":
            v = p["value"] + 0.0 * b + 0.0 * t
        elif self.kind == "affine":
            v = p["intercept"] + p["slope"] * b + p["time_slope"] * t
        elif self.kind == "call":
            v = p["offset"] + np.maximum(p["intercept"] + p["scale"] * b - p["strike"], 0.0) + 0.0 * t
        else:
            v = np.where(t > p["at"], p["after"], p["before"]) + 0.0 * b
        return v

    def lattice_values(self, model: LatticeModel):
        """Per-step node values for a ``nodes`` rule, the rule itself otherwise."""
        if self.kind != "nodes":
            return self
        vals = dict(self.params)["values"]
        if len(vals) != model.n_steps + 1:
            raise ConfigurationError(f"nodes rule has {len(vals)} steps, the model has {model.n_steps + 1}")
        return [np.asarray(v, dtype=float) for v in vals]

    def describe(self) -> str:
        if self.kind == "nodes":
            return "node values"
        p = dict(self.params)
        if self.kind == "constant":
            return f"constant {p['value']:g}"
        if self.kind == "affine":
            return f"affine {p['intercept']:g} + {p['slope']:g} B + {p['time_slope']:g} t"
        if self.kind == "call":
            return f"call {p['offset']:g} + max({p['intercept']:g} + {p['scale']:g} B - {p['strike']:g}, 0)"
        return f"step {p['before']:g} -> {p['after']:g} after t = {p['at']:g}"


RULE_FIELDS = {
    "constant": {"value": 0.0},
    "affine": {"intercept": 0.0, "slope": 0.0, "time_slope": 0.0},
    "call": {"strike": 0.0, "scale": 1.0, "intercept": 0.0, "offset": 0.0},
    "step": {"at": 0.0, "before": 0.0, "after": 0.0},
}


# ---------------------------------------------------------------------------
# schema


def _opt(t):
    return ("optional", t)


RULE = "rule"
SCHEMA: dict = {
    "run": ("enum", RUN_KINDS),
    "seed": "int",
    "output": "str",
    "beta": "float",
    "model": {"n_steps": "int", "dt": "float", "increment": _opt("float"), "up_prob": "float",
              "increments": ("enum", ("gaussian", "two-point")), "n_paths": "int"},
    "default_law": {"kind": ("enum", ("none", "deterministic", "hazard_of_path", "cox")),
                    "masses": ("list", "float"), "intercept": "float", "slope": "float",
                    "state": ("enum", ("current", "terminal")), "lo": "float", "hi": "float", "rate": RULE},
    "driver": {"kind": ("enum", ("zero", "linear", "g")), "r": "float", "theta": "float", "g": RULE},
    "terminal": RULE,
    "barriers": {"lower": _opt(RULE), "upper": _opt(RULE)},
    "game": {"qproc": RULE, "xi1": RULE, "xi2": RULE, "theta": "int"},
    "penalize": {"levels": ("list", "float"), "mode": ("enum", ("lower", "upper", "double"))},
    "link": {"levels": ("list", "int"), "horizon": "float", "coarse_steps": "int",
             "hazard": {"intercept": "float", "slope": "float"}},
    "mc": {"n_paths": "int", "exact": "bool", "penalty": _opt("float"),
           "basis": {"kind": ("enum", ("polynomial", "piecewise", "indicator")), "degree": "int", "bins": "int",
                     "ridge": "float"}},
    "black_scholes": {"S0": "float", "K": "float", "T": "float", "r": "float", "mu": "float", "sigma": RULE,
                      "sigma_min": "float", "n_steps": "int", "n_paths": "int", "intensity": "float",
                      "recovery": "float"},
    "tolerances": ("map", "float"),
}

def _const(v: float) -> Rule:
    return Rule("constant", (("value", float(v)),))


DEFAULTS = {
    "seed": 0,
    "beta": 4.0,
    "model": {"n_steps": 2, "dt": 0.25, "increment": None, "up_prob": 0.5, "increments": "gaussian", "n_paths": 10000},
    "default_law": {"kind": "none", "intercept": 0.1, "slope": 0.0, "state": "current", "lo": 0.0, "hi": 0.95,
                    "rate": _const(0.0)},
    "driver": {"kind": "zero", "r": 0.0, "theta": 0.0, "g": _const(0.0)},
    "terminal": _const(0.0),
    "barriers": {"lower": None, "upper": None},
    "penalize": {"levels": [1.0, 10.0, 100.0, 1000.0, 10000.0], "mode": "double"},
    "link": {"horizon": 1.0, "coarse_steps": 2, "hazard": {"intercept": 0.15, "slope": 0.1}},
    "mc": {"n_paths": 10000, "exact": False, "penalty": None,
           "basis": {"kind": "polynomial", "degree": 3, "bins": 16, "ridge": 1e-8}},
    "black_scholes": {"S0": 100.0, "K": 100.0, "T": 1.0, "r": 0.05, "mu": 0.05, "sigma": _const(0.2), "sigma_min": 1e-3,
                      "n_steps": 50, "n_paths": 100000, "intensity": 0.0, "recovery": 0.0},
    "tolerances": {},
}


def _coerce(value, kind, path, errors):
    """Check ``value`` against ``kind``; return the converted value (or ``None`` after recording an error)."""
    if isinstance(kind, tuple) and kind[0] == "optional":
        return None if value is None else _coerce(value, kind[1], path, errors)
    if isinstance(kind, dict):
        if not isinstance(value, dict):
            errors.append(f"{path}: expected a mapping, got {type(value).__name__}")
            return None
        out = {}
        for key, v in value.items():
            sub = f"{path}.{key}" if path else str(key)
            if key not in kind:
                errors.append(f"{sub}: unknown key")
                continue
            out[key] = _coerce(v, kind[key], sub, errors)
        return out
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return None
        return value
    if kind == "float":
        if isinstance(value, bool):
            errors.append(f"{path}: expected a number, got {value!r}")
            return None
        try:
            return float(value)
        except (TypeError, ValueError):
            errors.append(f"{path}: expected a number, got {value!r}")
            return None
    if kind == "str":
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
            return None
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true or false, got {value!r}")
            return None
        return value
    if kind == RULE:
        return _coerce_rule(value, path, errors)
    if kind[0] == "enum":
        if value not in kind[1]:
            errors.append(f"{path}: expected one of {', '.join(kind[1])}, got {value!r}")
            return None
        return value
    if kind[0] == "list":
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list, got {value!r}")
            return None
        return [_coerce(v, kind[1], f"{path}[{i}]", errors) for i, v in enumerate(value)]
    if kind[0] == "map":
        if not isinstance(value, dict):
            errors.append(f"{path}: expected a mapping, got {value!r}")
            return None
        return {str(k): _coerce(v, kind[1], f"{path}.{k}", errors) for k, v in value.items()}
    raise AssertionError(kind)


def _coerce_rule(value, path, errors):
    if not isinstance(value, (dict, bool)):
        num = _coerce(value, "float", path, [])
        if num is not None:
            return Rule("constant", (("value", num),))
    if not isinstance(value, dict):
        errors.append(f"{path}: expected a number or a rule mapping, got {value!r}")
        return None
    kind = value.get("kind")
    if kind not in RULE_KINDS:
        errors.append(f"{path}.kind: expected one of {', '.join(RULE_KINDS)}, got {kind!r}")
        return None
    if kind == "nodes":
        return _coerce_nodes(value, path, errors)
    params = dict(RULE_FIELDS[kind])
    for key, v in value.items():
        if key == "kind":
            continue
        if key not in params:
            errors.append(f"{path}.{key}: unknown key for a {kind} rule")
            continue
        num = _coerce(v, "float", f"{path}.{key}", errors)
        if num is not None:
            params[key] = num
    return Rule(kind, tuple(sorted(params.items())))


def _coerce_nodes(value, path, errors):
    extra = [k for k in value if k not in ("kind", "values")]
    for k in extra:
        errors.append(f"{path}.{k}: unknown key for a nodes rule")
    steps = value.get("values")
    if not isinstance(steps, list) or not steps:
        errors.append(f"{path}.values: expected a list with one list of node values per step")
        return None
    out = []
    for k, row in enumerate(steps):
        if not isinstance(row, list) or len(row) != 1 << k:
            errors.append(f"{path}.values[{k}]: expected {1 << k} node values")
            return None
        out.append(tuple(_coerce(v, "float", f"{path}.values[{k}][{i}]", errors) for i, v in enumerate(row)))
    return Rule("nodes", (("values", tuple(out)),))


def _merge(defaults: dict, given: dict) -> dict:
    out = dict(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# scenario


@dataclass(eq=False)
class Scenario:
    """Validated scenario with the constructed lattice objects."""

    data: dict
    model: LatticeModel | None = None
    law: DefaultLaw | None = None
    bundle: AzemaBundle | None = None
    measure: Measure | None = None
    problem: DRBSDEProblem | None = None
    game: GameSpec | None = None
    extras: dict = field(default_factory=dict)

    @property
    def run(self) -> str:
        return self.data["run"]

    def tolerance(self, check: str, default: float) -> float:
        return float(self.data["tolerances"].get(check, default))

    def rule(self, section: str, key: str | None = None) -> Any:
        v = self.data[section]
        return v if key is None else v.get(key)


def load_yaml(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError([f"<file>: not valid YAML ({exc})"]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ScenarioError(["<file>: the scenario must be a mapping"])
    return data


def parse_scenario(text: str, overrides: dict | None = None) -> Scenario:
    """Parse, check and build a scenario; raise ``ScenarioError`` listing every problem."""
    raw = load_yaml(text)
    for path, value in (overrides or {}).items():
        set_path(raw, path, value)
    errors: list[str] = []
    if "run" not in raw:
        errors.append("run: missing (one of " + ", ".join(RUN_KINDS) + ")")
    checked = _coerce(raw, SCHEMA, "", errors)
    if errors:
        raise ScenarioError(errors)
    data = _merge(DEFAULTS, checked)
    _check_run_fields(data, errors)
    if errors:
        raise ScenarioError(errors)
    sc = Scenario(data)
    _build(sc, errors)
    if errors:
        raise ScenarioError(errors)
    return sc


def set_path(raw: dict, path: str, value) -> None:
    """Set a dotted field (creating mappings on the way)."""
    keys = path.split(".")
    cur = raw
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value


def _check_run_fields(d: dict, errors: list) -> None:
    run = d["run"]
    m = d["model"]
    for key in ("n_steps", "n_paths"):
        if m[key] is not None and m[key] < 1:
            errors.append(f"model.{key}: must be at least 1")
    if run in ("penalize",) and d["barriers"]["lower"] is None and d["barriers"]["upper"] is None:
        errors.append("barriers: penalize needs at least one barrier")
    if run in ("penalize",):
        for i, n in enumerate(d["penalize"]["levels"]):
            if not (n > 0):
                errors.append(f"penalize.levels[{i}]: penalty must be positive, got {n!r}")
    if run in ("dynkin-oracle", "saddle-verify"):
        if "game" not in d or d["game"] is None:
            errors.append("game: required for run " + run)
        else:
            for key in ("qproc", "xi1", "xi2"):
                if d["game"].get(key) is None:
                    errors.append(f"game.{key}: required for run {run}")
        for key in ("lower", "upper"):
            if d["barriers"][key] is None:
                errors.append(f"barriers.{key}: required for run {run}")
    if run == "link-check" and d["driver"]["kind"] == "linear" and (d["driver"]["r"] or d["driver"]["theta"]):
        errors.append("driver: link-check needs a driver free of (y, z) (kind zero or g)")
    if run == "mc-solve" and m["increments"] == "gaussian" and d["default_law"]["kind"] not in ("none", "cox"):
        errors.append("default_law.kind: Gaussian simulation supports only none or cox defaults")


def _labels(d: dict) -> dict:
    out = {}
    for key in ("lower", "upper"):
        r = d["barriers"][key]
        if r is not None:
            out[key] = f"barriers.{key} ({r.describe()})"
    return out


def _build(sc: Scenario, errors: list) -> None:
    d = sc.data
    run = d["run"]
    if run == "example-bs":
        return
    m = d["model"]
    if run == "mc-solve" and m["increments"] == "gaussian":
        _check_simulation(d, errors)
        return
    try:
        sc.model = build_model(m["n_steps"], m["dt"], m["increment"], m["up_prob"])
    except DRBSDEError as exc:
        errors.append(f"model: {exc}")
        return
    try:
        sc.law = build_law(sc.model, d["default_law"])
        sc.bundle = build_azema(sc.model, sc.law)
        sc.measure = reweight_to_Q(sc.model, sc.bundle)
    except DRBSDEError as exc:
        errors.append(f"default_law: {exc}")
        return
    try:
        driver = build_driver(d["driver"])
        driver.validate(sc.model)
    except DRBSDEError as exc:
        errors.append(f"driver: {exc}")
        return
    lower, upper = d["barriers"]["lower"], d["barriers"]["upper"]
    game = d.get("game")
    if game is not None and run in ("dynkin-oracle", "saddle-verify"):
        try:
            sc.game = GameSpec(sc.model, sc.measure, lower, upper, game["qproc"], game["xi1"], game["xi2"], driver,
                               _labels(d))
            sc.game.validate()
        except DRBSDEError as exc:
            field_ = "game.xi2" if "penalty" in str(exc) else ("barriers" if "H3" in str(exc) else "game")
            errors.append(f"{field_}: {exc}")
            return
        sc.problem = sc.game.problem(d["beta"])
        return
    try:
        sc.problem = DRBSDEProblem(sc.model, sc.measure, d["terminal"], driver, lower, upper, d["beta"], labels=_labels(d))
        sc.problem.validate()
    except DRBSDEError as exc:
        errors.append(f"barriers: {exc}" if "H" in str(exc)[:5] else f"terminal: {exc}")


def _check_simulation(d: dict, errors: list) -> None:
    """Checks for Gaussian runs, which never build the lattice."""
    m = d["model"]
    if not (m["dt"] > 0):
        errors.append("model.dt: must be positive")
        return
    rules = [d["terminal"], d["driver"]["g"], d["default_law"]["rate"], d["barriers"]["lower"], d["barriers"]["upper"]]
    if any(r is not None and r.kind == "nodes" for r in rules):
        errors.append("model.increments: nodes rules need a lattice (two-point increments)")
        return
    t = np.arange(m["n_steps"] + 1) * m["dt"]
    grid = np.linspace(-6.0, 6.0, 241) * np.sqrt(max(t[-1], m["dt"]))
    if d["default_law"]["kind"] == "cox":
        lam = np.array([d["default_law"]["rate"](tk, grid) for tk in t])
        if np.any(lam < 0):
            errors.append("default_law.rate: cox rate must be nonnegative (checked for |B| up to 6 standard deviations)")
    lo, hi = d["barriers"]["lower"], d["barriers"]["upper"]
    if lo is not None and hi is not None:
        gap = np.array([hi(tk, grid) - lo(tk, grid) for tk in t[:-1]])
        if np.any(gap <= 0):
            errors.append(f"barriers: H3: barriers.lower ({lo.describe()}) >= barriers.upper ({hi.describe()}) on the state grid")


def build_law(model: LatticeModel, spec: dict) -> DefaultLaw:
    kind = spec["kind"]
    if kind == "none":
        return DefaultLaw.none(model)
    if kind == "deterministic":
        if spec.get("masses") is None:
            raise ConfigurationError("masses: required for a deterministic law")
        return DefaultLaw.deterministic(model, spec["masses"])
    if kind == "hazard_of_path":
        return DefaultLaw.affine_hazard(model, spec["intercept"], spec["slope"], spec["state"], spec["lo"], spec["hi"])
    rate = spec["rate"]
    lam = np.stack([np.broadcast_to(rate(model.times[j], model.B[:, j]), (model.n_paths,)) for j in range(model.n_steps)], axis=1)
    if np.any(lam < 0):
        raise ConfigurationError("cox rate must be nonnegative")
    return DefaultLaw.from_hazards(model, -np.expm1(-lam * model.dt), "cox")


def build_driver(spec: dict) -> DriverSpec:
    if spec["kind"] == "zero":
        return DriverSpec.zero()
    if spec["kind"] == "g":
        return DriverSpec.from_g(spec["g"])
    return DriverSpec.linear(spec["r"], spec["theta"], spec["g"])


def coarse_hazard_rule(intercept: float, slope: float) -> Callable:
    """Coarse-grid default masses from a hazard ``clip(intercept + slope tanh(B_T), 0, 0.95)`` that looks ahead."""

    def rule(t, Bc):
        lam = np.clip(intercept + slope * np.tanh(Bc[:, -1:]), 0.0, 0.95)
        n = Bc.shape[1] - 1
        return lam * (1.0 - lam) ** np.arange(n)[None, :]

    return rule
