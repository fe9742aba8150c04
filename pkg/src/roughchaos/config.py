"""Experiment configuration: flat ``dotted.key = value`` files.

One assignment per line, ``#`` starts a comment.  Lists are comma separated
(``ns = 16, 32, 64``).  Unknown keys are rejected so that a typo never runs
silently with a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .coefficients import BUILTIN_NAMES, from_name
from .drivers import DriverKind, GridSpec

__all__ = ["ConfigError", "ExperimentConfig", "EXPERIMENTS", "parse_config", "load_config"]

EXPERIMENTS = ("diagnose", "iid-rate", "chaos-rate", "coupling")
LAWS = ("normal", "uniform")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    driver: DriverKind = field(default_factory=DriverKind.brownian)
    grid: GridSpec = field(default_factory=lambda: GridSpec(1.0, 256, 1))
    state_dim: int = 1
    coefficient: str = "moment_tanh"
    coefficient_params: tuple = ()
    init_law: str = "normal"
    init_loc: float = 0.0
    init_scale: float = 1.0
    iid_law: str = "normal"
    iid_dim: int = 1
    log_correction: bool = False
    ns: tuple = (16, 32, 64, 128, 256, 512)
    replications: int = 64
    n_ref: int = 4096
    seed: int = 0
    p: float = 2.5
    q: float = 8.0
    alpha: float = 1.0
    window: int = 32
    particles: int = 8
    output: str = "results"
    format: str = "csv"
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if not self.ns or any(n < 1 for n in self.ns):
            raise ConfigError("ns must be a non-empty list of positive integers")
        if list(self.ns) != sorted(set(self.ns)):
            raise ConfigError("ns must be strictly increasing")
        if self.replications < 1:
            raise ConfigError("replications must be positive")
        if self.n_ref < 1:
            raise ConfigError("n_ref must be positive")
        if self.experiment in ("chaos-rate", "coupling") and self.n_ref < 4 * max(self.ns):
            raise ConfigError(f"n_ref={self.n_ref} must be at least 4 * max(ns) = {4 * max(self.ns)}")
        if self.experiment == "iid-rate" and self.iid_dim not in (1, 2, 3):
            raise ConfigError("iid.dim must be 1, 2 or 3")
        if self.init_law not in LAWS or self.iid_law not in LAWS:
            raise ConfigError(f"laws must be one of {LAWS}")
        if self.coefficient not in BUILTIN_NAMES:
            raise ConfigError(f"unknown coefficient {self.coefficient!r}")
        try:
            self.build_coefficient()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not (2.0 <= self.p < 3.0):
            raise ConfigError("analytics.p must lie in [2, 3)")
        if self.q < 8:
            raise ConfigError("analytics.q must be at least 8")
        if self.alpha <= 0:
            raise ConfigError("analytics.alpha must be positive")
        if self.window < 1 or self.particles < 1:
            raise ConfigError("analytics.window and analytics.particles must be positive")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def build_coefficient(self):
        return from_name(self.coefficient, dict(self.coefficient_params), self.state_dim, self.grid.dim)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        try:
            return replace(self, **changes)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _int(text):
    return int(text, 0)


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(_int(part.strip()) for part in text.split(",") if part.strip())


# key -> (field name or None, converter)
_KEYS = {
    "experiment": ("experiment", str),
    "driver.kind": (None, str),
    "driver.hurst": (None, float),
    "grid.horizon": (None, float),
    "grid.steps": (None, _int),
    "grid.dim": (None, _int),
    "state.dim": ("state_dim", _int),
    "coefficient.name": ("coefficient", str),
    "coefficient.a": (None, float),
    "coefficient.b": (None, float),
    "init.law": ("init_law", str),
    "init.loc": ("init_loc", float),
    "init.scale": ("init_scale", float),
    "iid.law": ("iid_law", str),
    "iid.dim": ("iid_dim", _int),
    "iid.log_correction": ("log_correction", _bool),
    "ns": ("ns", _int_list),
    "replications": ("replications", _int),
    "n_ref": ("n_ref", _int),
    "seed": ("seed", _int),
    "analytics.p": ("p", float),
    "analytics.q": ("q", float),
    "analytics.alpha": ("alpha", float),
    "analytics.window": ("window", _int),
    "analytics.particles": ("particles", _int),
    "output": ("output", str),
    "format": ("format", str),
    "workers": ("workers", _int),
}


def _unquote(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def parse_config(text: str) -> ExperimentConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            raw[key] = _KEYS[key][1](_unquote(value))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if "experiment" not in raw:
        raise ConfigError("missing key 'experiment'")

    kwargs = {_KEYS[k][0]: v for k, v in raw.items() if _KEYS[k][0] is not None}
    try:
        kind = raw.get("driver.kind", "brownian")
        if kind == "brownian":
            if "driver.hurst" in raw and raw["driver.hurst"] != 0.5:
                raise ConfigError("a Brownian driver has hurst 0.5")
            kwargs["driver"] = DriverKind.brownian()
        elif kind == "fbm":
            if "driver.hurst" not in raw:
                raise ConfigError("driver.hurst is required for fbm")
            kwargs["driver"] = DriverKind.fbm(raw["driver.hurst"])
        else:
            raise ConfigError(f"unknown driver kind {kind!r}")
        kwargs["grid"] = GridSpec(
            raw.get("grid.horizon", 1.0), raw.get("grid.steps", 256), raw.get("grid.dim", 1)
        )
        kwargs["coefficient_params"] = tuple(
            (name, raw[f"coefficient.{name}"]) for name in ("a", "b") if f"coefficient.{name}" in raw
        )
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)

