"""Scenario files: ``[section]`` headers with ``key = value`` lines.

Sections and keys (defaults in brackets)::

    [geometry]  kind (interval | circle), n, a [0], b [1], radius [1]
    [flow]      field [zero], velocity, alpha, rate [0.5], omega [1],
                frequency [0], coefficients, time_rate [0], substeps [64],
                horizon [max(T, time) + 0.1], dual_field, dual_rate,
                dual_omega, dual_frequency
    [problem]   pivot [L2], operator [linear-diffusion], p [2], alpha [0],
                epsilon [1e-8], forcing [zero], initial [sine],
                perturbation [1e-3], T [1], N [100]
    [run]       time [0.5], newton_tol [1e-12], newton_maxit [25],
                levels [4], samples [5], fine_n [256], tolerance [1.05]

Lines starting with ``#`` or ``;`` are comments.  Lists are
comma-separated numbers; 2-D polynomial coefficients are ``i j cx cy``
groups separated by ``;``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fields import CATALOG, make_field
from .flowmap import FlowMap
from .mesh import EvolvingMesh, build_circle_mesh, build_interval_mesh
from .solver import KINDS, OperatorSpec, ProblemConfig, manufactured_heat, time_grid
from .spaces import PIVOTS, PivotSpec

FORCINGS = ("zero", "one", "sine", "manufactured")
INITIALS = ("zero", "one", "sine", "manufactured")

_STR, _INT, _FLOAT, _LIST = "str", "int", "float", "list"

SCHEMA = {
    "geometry": {"kind": _STR, "n": _INT, "a": _FLOAT, "b": _FLOAT, "radius": _FLOAT},
    "flow": {"field": _STR, "velocity": _LIST, "alpha": _FLOAT, "rate": _FLOAT,
             "omega": _FLOAT, "frequency": _FLOAT, "coefficients": _STR,
             "time_rate": _FLOAT, "substeps": _INT, "horizon": _FLOAT,
             "dual_field": _STR, "dual_rate": _FLOAT, "dual_omega": _FLOAT,
             "dual_frequency": _FLOAT},
    "problem": {"pivot": _STR, "operator": _STR, "p": _FLOAT, "alpha": _FLOAT,
                "epsilon": _FLOAT, "forcing": _STR, "initial": _STR,
                "perturbation": _FLOAT, "T": _FLOAT, "N": _INT},
    "run": {"time": _FLOAT, "newton_tol": _FLOAT, "newton_maxit": _INT, "levels": _INT,
            "samples": _INT, "fine_n": _INT, "tolerance": _FLOAT},
}
REQUIRED = {"geometry": ("kind", "n")}


@dataclass
class Entry:
    value: object
    line: int


@dataclass
class Scenario:
    sections: dict = field(default_factory=dict)   # section -> key -> Entry

    # access ---------------------------------------------------------------
    def get(self, section, key, default=None):
        e = self.sections.get(section, {}).get(key)
        return default if e is None else e.value

    def line(self, section, key):
        e = self.sections.get(section, {}).get(key)
        return None if e is None else e.line

    def has(self, section, key) -> bool:
        return key in self.sections.get(section, {})

    @property
    def kind(self) -> str:
        return self.get("geometry", "kind")

    @property
    def T(self) -> float:
        return self.get("problem", "T", 1.0)

    @property
    def N(self) -> int:
        return self.get("problem", "N", 100)

    @property
    def check_time(self) -> float:
        return self.get("run", "time", 0.5)

    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    # builders --------------------------------------------------------------
    def reference_mesh(self, n=None):
        n = self.get("geometry", "n") if n is None else n
        if self.kind == "interval":
            return build_interval_mesh(self.get("geometry", "a", 0.0),
                                       self.get("geometry", "b", 1.0), n)
        return build_circle_mesh(self.get("geometry", "radius", 1.0), n)

    def _field(self, prefix=""):
        name = self.get("flow", prefix + "field", "zero" if not prefix else None)
        if name is None:
            return None
        key = lambda k: prefix + k if prefix else k  # noqa: E731
        params = {"dim": self.dim}
        if name == "translation":
            params["velocity"] = self.get("flow", "velocity")
        elif name == "dilation":
            params["alpha"] = self.get("flow", "alpha")
        elif name in ("radial-circle", "rotating-circle"):
            params["rate"] = self.get("flow", key("rate"), self.get("flow", "rate", 0.5))
            params["frequency"] = self.get("flow", key("frequency"),
                                           self.get("flow", "frequency", 0.0))
            params["omega"] = self.get("flow", key("omega"), self.get("flow", "omega", 1.0))
        elif name == "user-polynomial":
            params["coefficients"] = parse_coefficients(self.get("flow", "coefficients"),
                                                        self.dim,
                                                        self.line("flow", "coefficients"))
            params["time_rate"] = self.get("flow", "time_rate", 0.0)
        if name == "radial-circle":
            params.pop("omega")
        return make_field(name, **params)

    def field(self):
        return self._field()

    def dual_field(self):
        return self._field("dual_")

    def pivot_spec(self, variant=None):
        variant = variant or self.get("problem", "pivot", "L2")
        return PivotSpec(variant, self.dual_field() if variant == "DualFlowL1" else None)

    def horizon(self) -> float:
        default = max(self.T, self.check_time) + 0.1
        return self.get("flow", "horizon", default)

    def flow(self):
        return FlowMap(self.field(), horizon=self.horizon(),
                       substeps=self.get("flow", "substeps", 64))

    def evolving_mesh(self, n=None, times=None, static=False):
        ref = self.reference_mesh(n)
        if static:
            return EvolvingMesh(ref)
        return EvolvingMesh(ref, self.flow(), times=times)

    def operator(self) -> OperatorSpec:
        return OperatorSpec(self.get("problem", "operator", "linear-diffusion"),
                            self.get("problem", "p", 2.0), self.get("problem", "alpha", 0.0),
                            self.get("problem", "epsilon", 1e-8))

    def forcing(self):
        return make_forcing(self, self.get("problem", "forcing", "zero"))

    def initial(self):
        return make_initial(self, self.get("problem", "initial", "sine"))

    def problem_config(self, n=None, N=None, static=False, record_functional=False):
        N = self.N if N is None else N
        mesh = self.evolving_mesh(n, times=time_grid(self.T, N), static=static)
        return ProblemConfig(mesh, self.operator(), self.T, N, self.forcing(), self.initial(),
                             self.get("run", "newton_tol", 1e-12),
                             self.get("run", "newton_maxit", 25), record_functional)


def parse_coefficients(text, dim, line=None):
    if text is None:
        raise ConfigError("user-polynomial needs 'coefficients'", line)
    try:
        if dim == 1:
            return [float(v) for v in text.split(",")]
        groups = [g.split() for g in text.split(";") if g.strip()]
        if any(len(g) != 4 for g in groups):
            raise ValueError
        return [(int(g[0]), int(g[1]), float(g[2]), float(g[3])) for g in groups]
    except ValueError:
        raise ConfigError(f"cannot parse coefficients {text!r}", line) from None


def _dilation_rate(sc: Scenario) -> float:
    name = sc.get("flow", "field", "zero")
    if name == "dilation":
        return sc.get("flow", "alpha")
    if name == "zero":
        return 0.0
    raise ConfigError("the manufactured solution needs a dilation or zero field",
                      sc.line("flow", "field"))


def make_forcing(sc: Scenario, name):
    if name == "zero":
        return None
    if name == "one":
        return lambda t, x: np.ones(x.shape[:-1])
    if name == "sine":
        return lambda t, x: np.sin(np.pi * x[..., 0]) * np.cos(t)
    if name == "manufactured":
        _, f, _ = manufactured_heat(_dilation_rate(sc), sc.get("geometry", "a", 0.0),
                                    sc.get("geometry", "b", 1.0))
        return f
    raise ConfigError(f"unknown forcing {name!r}", sc.line("problem", "forcing"))


def make_initial(sc: Scenario, name):
    """Initial data on the reference domain.

    'sine' is sin(pi (x-a)/(b-a)) on intervals and 1 + sin(theta) +
    0.5 cos(2 theta) on circles (theta the polar angle).
    """
    if name == "zero":
        return None
    if name == "one":
        return lambda x: np.ones(x.shape[:-1])
    if name == "sine":
        if sc.kind == "interval":
            a, b = sc.get("geometry", "a", 0.0), sc.get("geometry", "b", 1.0)
            return lambda x: np.sin(np.pi * (x[..., 0] - a) / (b - a))

        def circle(x):
            th = np.arctan2(x[..., 1], x[..., 0])
            return 1.0 + np.sin(th) + 0.5 * np.cos(2.0 * th)
        return circle
    if name == "manufactured":
        _, _, u0 = manufactured_heat(_dilation_rate(sc), sc.get("geometry", "a", 0.0),
                                     sc.get("geometry", "b", 1.0))
        return u0
    raise ConfigError(f"unknown initial data {name!r}", sc.line("problem", "initial"))


def _convert(kind, raw, line, key):
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if kind == _LIST:
            return [float(v) for v in raw.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}", line) from None
    return raw


def parse_config(text: str) -> Scenario:
    """Parse and validate a scenario; errors carry the offending line number."""
    sc = Scenario()
    section = None
    section_lines = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", number)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", number)
            if section in section_lines:
                raise ConfigError(f"duplicate section [{section}] (lines "
                                  f"{section_lines[section]} and {number})", number)
            section_lines[section] = number
            sc.sections[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", number)
        if section is None:
            raise ConfigError("key outside of any section", number)
        key, value = (s.strip() for s in line.split("=", 1))
        kinds = SCHEMA[section]
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r} in [{section}]", number)
        prev = sc.sections[section].get(key)
        if prev is not None:
            raise ConfigError(f"duplicate key {key!r} (lines {prev.line} and {number})", number)
        sc.sections[section][key] = Entry(_convert(kinds[key], value, number, key), number)
    validate(sc)
    return sc


def _need(cond, message, line):
    if not cond:
        raise ConfigError(message, line)


def validate(sc: Scenario):
    for section, keys in REQUIRED.items():
        for key in keys:
            _need(sc.has(section, key), f"missing mandatory key {key!r} in [{section}]",
                  _section_line(sc, section))
    g = lambda k: sc.line("geometry", k)  # noqa: E731
    _need(sc.kind in ("interval", "circle"), f"geometry kind must be interval or circle, "
          f"got {sc.kind!r}", g("kind"))
    if sc.kind == "interval":
        _need(sc.get("geometry", "n") >= 2, "interval needs n >= 2", g("n"))
        _need(sc.get("geometry", "a", 0.0) < sc.get("geometry", "b", 1.0),
              "interval needs a < b", g("b") or g("a"))
    else:
        _need(sc.get("geometry", "n") >= 3, "circle needs n >= 3", g("n"))
        _need(sc.get("geometry", "radius", 1.0) > 0.0, "radius must be positive", g("radius"))

    f = lambda k: sc.line("flow", k)  # noqa: E731
    for key in ("field", "dual_field"):
        name = sc.get("flow", key)
        if name is not None:
            _need(name in CATALOG, f"unknown field {name!r}; catalog: {', '.join(CATALOG)}",
                  f(key))
    name = sc.get("flow", "field", "zero")
    needs = {"translation": "velocity", "dilation": "alpha", "user-polynomial": "coefficients"}
    if name in needs:
        _need(sc.has("flow", needs[name]), f"field {name} needs {needs[name]!r}", f("field"))
    if name in ("radial-circle", "rotating-circle"):
        _need(sc.kind == "circle", f"field {name} needs circle geometry", f("field"))
    if name == "dilation":
        _need(sc.kind == "interval", "dilation is configured for intervals", f("field"))
    if name == "translation":
        _need(len(sc.get("flow", "velocity")) == sc.dim,
              f"velocity needs {sc.dim} component(s)", f("velocity"))
    _need(sc.get("flow", "substeps", 64) >= 1, "substeps must be positive", f("substeps"))
    _need(sc.horizon() >= max(sc.T, sc.check_time), "horizon must cover T and the check time",
          f("horizon"))

    p = lambda k: sc.line("problem", k)  # noqa: E731
    pivot = sc.get("problem", "pivot", "L2")
    _need(pivot in PIVOTS or pivot == "all", f"unknown pivot {pivot!r}", p("pivot"))
    if pivot == "Hminus1":
        _need(sc.kind == "interval", "Hminus1 pivot needs interval geometry", p("pivot"))
    if pivot == "DualFlowL1":
        _need(sc.kind == "circle", "DualFlowL1 pivot needs circle geometry", p("pivot"))
        _need(sc.has("flow", "dual_field"), "DualFlowL1 pivot needs flow.dual_field", p("pivot"))
    _need(sc.get("problem", "operator", "linear-diffusion") in KINDS,
          f"unknown operator; expected one of {KINDS}", p("operator"))
    expo = sc.get("problem", "p", 2.0)
    eps = sc.get("problem", "epsilon", 1e-8)
    _need(expo > 1.0, f"p must exceed 1, got {expo}", p("p"))
    _need(sc.get("problem", "operator", "linear-diffusion") != "linear-diffusion" or expo == 2.0,
          "linear-diffusion needs p = 2", p("p"))
    _need(sc.get("problem", "alpha", 0.0) >= 0.0, "alpha must be nonnegative", p("alpha"))
    _need(eps >= 0.0, "epsilon must be nonnegative", p("epsilon"))
    _need(eps > 0.0 or expo >= 2.0, "epsilon = 0 needs p >= 2", p("epsilon"))
    for key, choices in (("forcing", FORCINGS), ("initial", INITIALS)):
        val = sc.get("problem", key)
        if val is not None:
            _need(val in choices, f"unknown {key} {val!r}; expected one of {choices}", p(key))
    _need(sc.T > 0.0, "T must be positive", p("T"))
    _need(sc.N >= 1, "N must be at least 1", p("N"))
    _need(sc.get("problem", "perturbation", 1e-3) > 0.0, "perturbation must be positive",
          p("perturbation"))

    r = lambda k: sc.line("run", k)  # noqa: E731
    _need(0.0 < sc.check_time, "check time must be positive", r("time"))
    _need(sc.get("run", "newton_tol", 1e-12) > 0.0, "Newton tolerance must be positive",
          r("newton_tol"))
    _need(sc.get("run", "newton_maxit", 25) >= 1, "newton_maxit must be positive",
          r("newton_maxit"))
    _need(sc.get("run", "levels", 4) >= 2, "levels must be at least 2", r("levels"))
    _need(sc.get("run", "samples", 5) >= 1, "samples must be positive", r("samples"))
    _need(sc.get("run", "fine_n", 256) >= 2, "fine_n must be at least 2", r("fine_n"))
    _need(sc.get("run", "tolerance", 1.05) > 0.0, "tolerance must be positive", r("tolerance"))


def _section_line(sc: Scenario, section):
    entries = sc.sections.get(section)
    if not entries:
        return None
    return min(e.line for e in entries.values())


def load_config(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)
