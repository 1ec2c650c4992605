"""Experiment configuration: JSON parsing, defaults and fail-closed validation.

A config is a JSON object.  Unknown keys anywhere are errors, so a typo
such as ``"stepsize"`` never silently falls back to a default.  See the
README for the full key reference.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Union

from ..samplers import SAMPLERS
from ..targets import NoiseKind
from ..tuner import TunerConfig

SIDECAR_FORMAT = "smile-bench-sidecar/1"
METRICS = ("bias", "coverage", "moment_error")
TARGETS = ("icg", "rosenbrock", "funnel", "gmm25", "linreg")

# per-target parameters and their defaults
TARGET_PARAMS: Dict[str, Dict[str, Any]] = {
    "icg": {"dim": 10, "cond_lo": 0.01, "cond_hi": 100.0, "seed": 0},
    "rosenbrock": {"dim": 10, "Q": 0.1},
    "funnel": {"dim": 10},
    "gmm25": {"dim": 10},
    "linreg": {"n": 1024, "p": 5, "cond": 1.0, "noise_var": 1.0, "prior_var": 1.0, "seed": 0,
               "csv": None},
}
NOISE_PARAMS = {"kind": "none", "base_scale": 256.0, "seed": 1}
TUNER_PARAMS = {f.name: f.default for f in fields(TunerConfig)}
TUNER_PARAMS["enabled"] = False
COVERAGE_PARAMS = {"radius": 3.0 * math.sqrt(0.3), "min_hits": 10}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    target: Dict[str, Any]
    sampler: str
    noise: Dict[str, Any] = field(default_factory=lambda: dict(NOISE_PARAMS))
    chains: int = 10
    steps: int = 200_000
    burn_in_frac: float = 0.1
    step_grid: Union[List[float], Dict[str, Any]] = field(
        default_factory=lambda: {"coarse": [-6, 0]})
    refine: bool = False
    tuner: Dict[str, Any] = field(default_factory=lambda: dict(TUNER_PARAMS))
    seed: int = 0
    output_path: str = "results.csv"
    decoherence_L: Optional[float] = None
    batch_size: Optional[int] = None
    friction: float = 0.1
    alpha: float = 0.01
    redraw_per_substep: bool = False
    metric: Optional[str] = None
    aggregation: Optional[str] = None
    per_chain_bias: bool = False
    n_boot: int = 1000
    coverage: Dict[str, Any] = field(default_factory=lambda: dict(COVERAGE_PARAMS))
    thin: int = 1

    @property
    def target_name(self) -> str:
        return self.target["name"]

    @property
    def resolved_metric(self) -> str:
        if self.metric is not None:
            return self.metric
        return {"gmm25": "coverage", "linreg": "moment_error"}.get(self.target_name, "bias")

    def tuner_config(self) -> Optional[TunerConfig]:
        if not self.tuner["enabled"]:
            return None
        return TunerConfig(**self.tuner)

    def grid_values(self) -> List[float]:
        g = self.step_grid
        if isinstance(g, list):
            return [float(v) for v in g]
        lo, hi = g["coarse"]
        return [10.0 ** i for i in range(int(lo), int(hi) + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string", list: "list", dict: "object"}


def _check_type(path, value, kind, nullable=False):
    if value is None and nullable:
        return None
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return float(value) if ok else _type_error(path, value, kind)
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
        return value if ok else _type_error(path, value, kind)
    if not isinstance(value, kind):
        _type_error(path, value, kind)
    return value


def _type_error(path, value, kind):
    raise ConfigError(f"{path}: expected {_TYPES[kind]}, got {type(value).__name__} {value!r}")


def _merge_section(path, raw, defaults, types=None):
    if isinstance(raw, str):
        raw = {"name" if "kind" not in defaults else "kind": raw}
    if not isinstance(raw, dict):
        _type_error(path, raw, dict)
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{path}: unknown key {unknown[0]!r}")
    out = dict(defaults)
    for k, v in raw.items():
        d = defaults[k]
        kind = (types or {}).get(k) or (type(d) if d is not None else None)
        if kind is not None and kind is not type(None):
            v = _check_type(f"{path}.{k}", v, kind, nullable=d is None)
        out[k] = v
    return out


def _top_level_types():
    return {
        "sampler": str, "chains": int, "steps": int, "burn_in_frac": float, "refine": bool,
        "seed": int, "output_path": str, "decoherence_L": float, "batch_size": int,
        "friction": float, "alpha": float, "redraw_per_substep": bool, "metric": str,
        "aggregation": str, "per_chain_bias": bool, "n_boot": int, "thin": int,
    }


def config_from_dict(raw: dict, source: str = "config") -> ExperimentConfig:
    """Validate a parsed JSON object and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown key {unknown[0]!r}")
    for req in ("target", "sampler"):
        if req not in raw:
            raise ConfigError(f"{source}: missing required key {req!r}")

    kw: Dict[str, Any] = {}
    types = _top_level_types()
    nullable = {"decoherence_L", "batch_size", "metric", "aggregation"}
    for k, v in raw.items():
        if k in types:
            kw[k] = _check_type(f"{source}.{k}", v, types[k], nullable=k in nullable)

    # target
    t = raw["target"]
    name = t if isinstance(t, str) else (t.get("name") if isinstance(t, dict) else None)
    if name not in TARGETS:
        raise ConfigError(f"{source}.target.name: must be one of {list(TARGETS)}, got {name!r}")
    tdefaults = {"name": name, **TARGET_PARAMS[name]}
    ttypes = {"csv": str, "cond_lo": float, "cond_hi": float, "Q": float, "cond": float,
              "noise_var": float, "prior_var": float}
    kw["target"] = _merge_section(f"{source}.target", t, tdefaults, ttypes)

    if "noise" in raw:
        kw["noise"] = _merge_section(f"{source}.noise", raw["noise"], NOISE_PARAMS, {"base_scale": float})
    if "tuner" in raw:
        tun = raw["tuner"]
        if tun is False or tun is None:
            tun = {"enabled": False}
        elif tun is True:
            tun = {"enabled": True}
        kw["tuner"] = _merge_section(f"{source}.tuner", tun, TUNER_PARAMS)
    if "coverage" in raw:
        kw["coverage"] = _merge_section(f"{source}.coverage", raw["coverage"], COVERAGE_PARAMS)
    if "step_grid" in raw:
        kw["step_grid"] = _parse_grid(f"{source}.step_grid", raw["step_grid"])

    try:
        cfg = ExperimentConfig(**kw)
    except TypeError as exc:  # pragma: no cover - guarded by the key checks above
        raise ConfigError(f"{source}: {exc}") from None
    validate(cfg, source)
    return cfg


def _parse_grid(path, g):
    if isinstance(g, list):
        if not g:
            raise ConfigError(f"{path}: step grid must be non-empty")
        return [_check_type(f"{path}[{i}]", v, float) for i, v in enumerate(g)]
    if isinstance(g, dict):
        unknown = sorted(set(g) - {"coarse"})
        if unknown:
            raise ConfigError(f"{path}: unknown key {unknown[0]!r}")
        c = g.get("coarse")
        if not (isinstance(c, list) and len(c) == 2 and all(isinstance(v, int) and not isinstance(v, bool)
                                                          for v in c)):
            raise ConfigError(f"{path}.coarse: expected [lo_exponent, hi_exponent] integers")
        if c[0] > c[1]:
            raise ConfigError(f"{path}.coarse: lo exponent exceeds hi exponent")
        return {"coarse": list(c)}
    raise ConfigError(f"{path}: expected a list of step sizes or {{\"coarse\": [lo, hi]}}")


def validate(cfg: ExperimentConfig, source: str = "config") -> None:
    def bad(key, msg):
        raise ConfigError(f"{source}.{key}: {msg}")

    if cfg.sampler not in SAMPLERS:
        bad("sampler", f"must be one of {list(SAMPLERS)}, got {cfg.sampler!r}")
    if cfg.chains < 1:
        bad("chains", "must be >= 1")
    if cfg.steps < 1:
        bad("steps", "must be > 0")
    if not 0.0 <= cfg.burn_in_frac < 1.0:
        bad("burn_in_frac", "must lie in [0, 1)")
    if any(not (h > 0 and math.isfinite(h)) for h in cfg.grid_values()):
        bad("step_grid", "step sizes must be positive and finite")
    if cfg.decoherence_L is not None and not cfg.decoherence_L > 0:
        bad("decoherence_L", "must be positive (null for infinity)")
    if cfg.metric is not None and cfg.metric not in METRICS:
        bad("metric", f"must be one of {list(METRICS)}")
    if cfg.aggregation is not None and cfg.aggregation not in ("mean", "max"):
        bad("aggregation", "must be 'mean' or 'max'")
    if cfg.n_boot < 1:
        bad("n_boot", "must be >= 1")
    if cfg.thin < 1:
        bad("thin", "must be >= 1")
    if cfg.friction < 0:
        bad("friction", "must be non-negative")
    if not 0.0 <= cfg.alpha < 1.0:
        bad("alpha", "must lie in [0, 1)")
    try:
        NoiseKind(cfg.noise["kind"])
    except ValueError:
        bad("noise.kind", f"must be one of {[k.value for k in NoiseKind]}, got {cfg.noise['kind']!r}")
    if not cfg.noise["base_scale"] > 0:
        bad("noise.base_scale", "must be positive")
    t = cfg.target
    if "dim" in t and t["dim"] < 2:
        bad("target.dim", "must be >= 2")
    if t["name"] == "rosenbrock" and t["dim"] % 2:
        bad("target.dim", "Rosenbrock dimension must be even")
    if t["name"] == "linreg":
        if cfg.noise["kind"] != "none":
            bad("noise.kind", "linreg uses genuine mini-batch noise; injected noise must be 'none'")
        n = t["n"]
        if cfg.batch_size is not None and not 1 <= cfg.batch_size <= n:
            bad("batch_size", f"must satisfy 1 <= batch_size <= n = {n}")
    elif cfg.batch_size is not None:
        bad("batch_size", "mini-batching needs the linreg target")
    if cfg.resolved_metric == "coverage" and t["name"] != "gmm25":
        bad("metric", "coverage is defined for the gmm25 target only")
    try:
        TunerConfig(**cfg.tuner)  # checked even when disabled
    except (TypeError, ValueError) as exc:
        bad("tuner", str(exc))


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON experiment config (or a results sidecar)."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if isinstance(raw, dict) and raw.get("format") == SIDECAR_FORMAT:
        raw = raw.get("config")
    return config_from_dict(raw, str(path))
