"""Study configuration: JSON parsing, validation and the canonical hash."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cone import RhoStarRule
from .errors import ConfigError
from .geodesic import SolverOptions
from .measures import measure_from_spec
from .mobility import Linear, mobility_from_spec

KINDS = ("distance", "geodesic", "gamma", "jko", "ftl")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()[:16]


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("--config", "top level must be an object")
    return raw


@dataclass(frozen=True)
class StudyConfig:
    kind: str
    raw: dict
    seed: int = 0
    rule: RhoStarRule = RhoStarRule.CONST_ARGMAX_THETA
    solver: SolverOptions = field(default_factory=SolverOptions)
    params: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _number(raw, key, default=None, *, positive=False, integer=False, where=None):
    name = where or key
    if key not in raw:
        if default is None:
            raise ConfigError(name, "missing field")
        return default
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(name, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(name, f"must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _n_list(raw):
    if "N_list" not in raw:
        raise ConfigError("N_list", "missing field")
    values = raw["N_list"]
    if not isinstance(values, list) or not values:
        raise ConfigError("N_list", "expected a nonempty list of integers")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError("N_list", f"entries must be positive integers, got {v!r}")
        out.append(v)
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ConfigError("N_list", "must be strictly increasing")
    return tuple(out)


def _rule(raw):
    try:
        return RhoStarRule(raw.get("rule", RhoStarRule.CONST_ARGMAX_THETA.value))
    except ValueError as exc:
        raise ConfigError("rule", f"unknown rule {raw.get('rule')!r}") from exc


def _endpoints(raw):
    mode = raw.get("endpoints", "auto")
    if mode not in ("auto", "clip", "exact"):
        raise ConfigError("endpoints", f"expected 'auto', 'clip' or 'exact', got {mode!r}")
    return mode


def _configs(raw):
    for key in ("a", "b"):
        vals = raw[key]
        if not isinstance(vals, list) or len(vals) < 2:
            raise ConfigError(key, "expected a list of at least two positions")
        if len(vals) != len(raw["a"]):
            raise ConfigError("b", "must have as many entries as a")
    return tuple(float(v) for v in raw["a"]), tuple(float(v) for v in raw["b"])


def parse_config(raw: dict, seed: int | None = None) -> StudyConfig:
    """Validate ``raw`` and resolve it into objects; ``seed`` overrides the config seed."""
    raw = dict(raw)
    if seed is not None:
        raw["seed"] = int(seed)
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError("kind", f"expected one of {KINDS}, got {kind!r}")
    s = _number(raw, "seed", 0, integer=True)
    if s < 0:
        raise ConfigError("seed", "must be nonnegative")
    solver = SolverOptions.from_dict(raw.get("solver"))
    rule = _rule(raw)
    params = {}
    if kind in ("distance", "geodesic", "gamma", "jko"):
        params["mobility"] = (mobility_from_spec(raw["mobility"]) if "mobility" in raw
                              else Linear(1.0))
        params["p"] = _number(raw, "p", 2.0)
        if not params["p"] > 1:
            raise ConfigError("p", "must exceed 1")
        params["endpoints"] = _endpoints(raw)
    if kind in ("distance", "geodesic"):
        if "a" in raw or "b" in raw:
            if "a" not in raw or "b" not in raw:
                raise ConfigError("b" if "a" in raw else "a", "missing field")
            params["a"], params["b"] = _configs(raw)
        else:
            for key in ("mu0", "mu1"):
                if key not in raw:
                    raise ConfigError(key, "missing field (or give explicit 'a' and 'b')")
            params["mu0"] = measure_from_spec(raw["mu0"], "mu0")
            params["mu1"] = measure_from_spec(raw["mu1"], "mu1")
            params["N"] = _number(raw, "N", integer=True, positive=True)
    elif kind == "gamma":
        params["mu0"] = measure_from_spec(raw.get("mu0"), "mu0")
        params["mu1"] = measure_from_spec(raw.get("mu1"), "mu1")
        params["N_list"] = _n_list(raw)
    elif kind == "jko":
        from .jko import energy_from_spec

        if params["p"] != 2:
            raise ConfigError("p", "the JKO study is defined for p = 2 only")
        params["mu0"] = measure_from_spec(raw.get("mu0"), "mu0")
        params["F"] = energy_from_spec(raw.get("F"))
        params["tau"] = _number(raw, "tau", positive=True)
        params["n_steps"] = _number(raw, "n_steps", integer=True)
        if params["n_steps"] < 0:
            raise ConfigError("n_steps", "must be nonnegative")
        params["N_list"] = _n_list(raw)
        params["q"] = _number(raw, "q", 1.5)
        if not 1 <= params["q"] < 2:
            raise ConfigError("q", "must lie in [1, 2)")
    elif kind == "ftl":
        from .ftl import law_from_spec

        params["law"] = law_from_spec(raw.get("law", {"kind": "traffic", "M": 1.0}))
        rie = raw.get("riemann")
        if (not isinstance(rie, list) or len(rie) != 2
                or not all(isinstance(r, (int, float)) and not isinstance(r, bool) for r in rie)):
            raise ConfigError("riemann", "expected [rho_L, rho_R]")
        params["riemann"] = (float(rie[0]), float(rie[1]))
        params["N_list"] = _n_list(raw)
        params["t"] = _number(raw, "t", positive=True)
        params["dt"] = _number(raw, "dt", 0.0)
        params["profile_points"] = _number(raw, "profile_points", 201, integer=True, positive=True)
    return StudyConfig(kind, raw, s, rule, solver, params)
