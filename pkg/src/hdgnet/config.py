"""TOML simulation configuration.

Layout::

    model = "ooc"

    [geometry]          # builder = "maze" | "single_arc" | "star", or points/lines paths
    [physical]          # nu, mu, epsilon, sigma, a, b, c, d, k1, k2, chi0, m1, m2, omega_KK
    [time]              # T_final, dt_init, adaptive, dt_min, dt_max
    [time.newton]       # eps_abs, max_iterations, strategy, alpha
    [discretization]    # h_target, tau, tau_scaling
    [initial]           # <equation> = function
    [sources]           # <equation> = function
    [boundary.<tag>]    # <equation> | "all" = {type = ..., ...}
    [domains.<id>]      # initial / sources / physical sub-tables, x0

Functions are resolved with :func:`hdgnet.expressions.resolve`.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from importlib import resources
from types import MappingProxyType
from typing import Any, Mapping

import tomli
import tomli_w

from . import expressions
from .expressions import ResolvedFunction, literal
from .geometry import NetworkGeometry, load_geometry, maze_geometry, single_arc, star_geometry
from .hdg import (
    Dirichlet,
    InvalidCondition,
    KedemKatchalsky,
    Neumann,
    Robin,
    TraceContinuity,
    default_conditions,
)
from .problems import MODELS, ProblemSpec, UnknownModel, build_problem
from .time_integration import NewtonConfig

__all__ = [
    "ConfigError",
    "MissingRequiredKey",
    "TypeMismatch",
    "UnresolvableFunction",
    "UnknownDomainId",
    "GeometrySpec",
    "TimeConfig",
    "DiscretizationConfig",
    "ConditionSpec",
    "DomainOverride",
    "EffectiveDomain",
    "SimulationConfig",
    "load_config",
    "load_config_file",
    "bundled_config",
    "dump_config",
    "apply_domain_overrides",
    "build_conditions",
]

PHYSICAL_KEYS = ("nu", "mu", "epsilon", "sigma", "a", "b", "c", "d", "k1", "k2", "chi0", "m1", "m2", "omega_KK")
BUILDERS = ("maze", "single_arc", "star")
CONDITION_TYPES = ("neumann", "dirichlet", "robin", "continuity", "kedem_katchalsky")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class MissingRequiredKey(ConfigError):
    def __init__(self, path: str):
        super().__init__(path, "required key is missing")


class TypeMismatch(ConfigError):
    pass


class UnresolvableFunction(ConfigError):
    pass


class UnknownDomainId(ConfigError):
    def __init__(self, domain_id):
        super().__init__(f"domains.{domain_id}", "no such domain")
        self.domain_id = domain_id


# ---------------------------------------------------------------------------
# Typed model


@dataclass(frozen=True)
class GeometrySpec:
    builder: str | None = None
    points: str | None = None
    lines: str | None = None
    length_scale: float = 1.0
    n_arms: int = 3
    length: float = 1.0
    base_dir: str = field(default=".", compare=False)

    def build(self) -> NetworkGeometry:
        if self.builder == "maze":
            return maze_geometry(self.length_scale)
        if self.builder == "single_arc":
            return single_arc(self.length * self.length_scale)
        if self.builder == "star":
            return star_geometry(self.n_arms, self.length * self.length_scale)
        if self.points is None or self.lines is None:
            raise ConfigError("geometry", "needs either 'builder' or both 'points' and 'lines'")
        return load_geometry(self._path(self.points), self._path(self.lines), self.length_scale)

    def _path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)


@dataclass(frozen=True)
class TimeConfig:
    T_final: float
    dt_init: float
    adaptive: bool = False
    dt_min: float | None = None
    dt_max: float | None = None
    newton: NewtonConfig = NewtonConfig()

    @property
    def n_steps(self) -> int:
        return max(1, round(self.T_final / self.dt_init))


@dataclass(frozen=True)
class DiscretizationConfig:
    h_target: float
    tau: tuple[float, ...]
    tau_scaling: str = "diffusive"


@dataclass(frozen=True)
class ConditionSpec:
    """One ``[boundary.<tag>]`` entry before it is bound to a geometry."""

    kind: str
    g: ResolvedFunction = field(default_factory=lambda: literal(0.0))
    alpha: float = 0.0
    beta: float = 0.0
    omega: float | None = None

    def realize(self, omega_default: float | None):
        if self.kind == "neumann":
            return Neumann(self.g)
        if self.kind == "dirichlet":
            return Dirichlet(self.g)
        if self.kind == "robin":
            return Robin(self.alpha, self.beta, self.g)
        if self.kind == "continuity":
            return TraceContinuity()
        omega = self.omega if self.omega is not None else omega_default
        if omega is None:
            raise ConfigError("", "kedem_katchalsky needs 'omega' or physical.omega_KK")
        return KedemKatchalsky(omega)


@dataclass(frozen=True)
class DomainOverride:
    initial: Mapping[str, ResolvedFunction] = field(default_factory=dict)
    sources: Mapping[str, ResolvedFunction] = field(default_factory=dict)
    physical: Mapping[str, float] = field(default_factory=dict)
    x0: float | None = None


@dataclass(frozen=True)
class EffectiveDomain:
    domain_id: int
    physical: Mapping[str, float]
    initial: tuple[ResolvedFunction, ...]
    sources: tuple[ResolvedFunction, ...]
    x0: float


@dataclass(frozen=True)
class SimulationConfig:
    model: str
    physical: Mapping[str, float]
    time: TimeConfig
    discretization: DiscretizationConfig
    initial: Mapping[str, ResolvedFunction]
    sources: Mapping[str, ResolvedFunction]
    boundary: Mapping[str, Mapping[str, ConditionSpec]]
    domains: Mapping[int, DomainOverride]
    geometry: GeometrySpec = GeometrySpec()

    @property
    def equations(self) -> tuple[str, ...]:
        return MODELS[self.model].equations

    @property
    def n_equations(self) -> int:
        return len(self.equations)

    def build_geometry(self) -> NetworkGeometry:
        geom = self.geometry.build()
        offsets = {i: d.x0 for i, d in self.domains.items() if d.x0 is not None}
        if offsets:
            for i in offsets:
                if i >= geom.n_arcs:
                    raise UnknownDomainId(i)
            geom = geom.with_x0(offsets)
        return geom

    def problem_for(self, domain_id: int, n_domains: int | None = None) -> ProblemSpec:
        eff = apply_domain_overrides(self, domain_id, n_domains)
        return build_problem(
            self.model,
            eff.physical,
            self.discretization.tau,
            dict(zip(self.equations, eff.sources)),
            tau_scaling=self.discretization.tau_scaling,
        )

    def problems(self, geometry: NetworkGeometry) -> list[ProblemSpec]:
        """One spec per arc; arcs without parameter overrides share one object."""
        n = geometry.n_arcs
        for i in self.domains:
            if i >= n:
                raise UnknownDomainId(i)
        shared = None
        out = []
        for a in range(n):
            over = self.domains.get(a)
            if over is not None and (over.physical or over.sources):
                out.append(self.problem_for(a, n))
                continue
            if shared is None:
                shared = self.problem_for(a, n)
            out.append(shared)
        return out

    def initial_functions(self, geometry: NetworkGeometry) -> list[tuple[ResolvedFunction, ...]]:
        n = geometry.n_arcs
        return [apply_domain_overrides(self, a, n).initial for a in range(n)]


# ---------------------------------------------------------------------------
# Loading


def _table(data: Mapping, key: str, path: str, required: bool = False) -> Mapping:
    if key not in data:
        if required:
            raise MissingRequiredKey(f"{path}{key}")
        return {}
    val = data[key]
    if not isinstance(val, dict):
        raise TypeMismatch(f"{path}{key}", f"expected a table, got {type(val).__name__}")
    return val


def _real(data: Mapping, key: str, path: str, default=None, required=False, positive=False) -> float | None:
    full = f"{path}{key}"
    if key not in data:
        if required:
            raise MissingRequiredKey(full)
        return default
    val = data[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise TypeMismatch(full, f"expected a number, got {type(val).__name__}")
    val = float(val)
    if not math.isfinite(val):
        raise TypeMismatch(full, "must be finite")
    if positive and not val > 0:
        raise TypeMismatch(full, f"must be > 0, got {val:g}")
    return val


def _int(data: Mapping, key: str, path: str, default: int) -> int:
    if key not in data:
        return default
    val = data[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise TypeMismatch(f"{path}{key}", f"expected an integer, got {type(val).__name__}")
    return val


def _bool(data: Mapping, key: str, path: str, default: bool) -> bool:
    if key not in data:
        return default
    val = data[key]
    if not isinstance(val, bool):
        raise TypeMismatch(f"{path}{key}", f"expected a boolean, got {type(val).__name__}")
    return val


def _str(data: Mapping, key: str, path: str, default=None, choices=None) -> str | None:
    if key not in data:
        return default
    val = data[key]
    if not isinstance(val, str):
        raise TypeMismatch(f"{path}{key}", f"expected a string, got {type(val).__name__}")
    if choices is not None and val not in choices:
        raise TypeMismatch(f"{path}{key}", f"expected one of {list(choices)}, got {val!r}")
    return val


def _function(value, path: str) -> ResolvedFunction:
    try:
        return expressions.resolve(value)
    except expressions.UnresolvableFunction as err:
        raise UnresolvableFunction(path, str(err)) from err


def _functions(table: Mapping, equations, path: str) -> dict[str, ResolvedFunction]:
    out = {}
    for key, value in table.items():
        if key not in equations:
            raise TypeMismatch(f"{path}{key}", f"unknown equation; expected one of {list(equations)}")
        out[key] = _function(value, f"{path}{key}")
    return out


def _physical(table: Mapping, path: str) -> dict[str, float]:
    out = {}
    for key in table:
        if key not in PHYSICAL_KEYS:
            raise TypeMismatch(f"{path}{key}", f"unknown physical parameter; expected one of {list(PHYSICAL_KEYS)}")
        out[key] = _real(table, key, path)
    return out


def _condition(value, path: str) -> ConditionSpec:
    if not isinstance(value, dict):
        raise TypeMismatch(path, "expected an inline table such as {type = \"neumann\"}")
    kind = _str(value, "type", f"{path}.", choices=CONDITION_TYPES)
    if kind is None:
        raise MissingRequiredKey(f"{path}.type")
    allowed = {
        "neumann": {"type", "g"},
        "dirichlet": {"type", "g"},
        "robin": {"type", "g", "alpha", "beta"},
        "continuity": {"type"},
        "kedem_katchalsky": {"type", "omega"},
    }[kind]
    for key in value:
        if key not in allowed:
            raise TypeMismatch(f"{path}.{key}", f"not a field of a {kind} condition")
    g = _function(value.get("g", 0.0), f"{path}.g")
    if kind == "robin":
        alpha = _real(value, "alpha", f"{path}.", required=True)
        beta = _real(value, "beta", f"{path}.", required=True)
        if alpha == 0.0 and beta == 0.0:
            raise TypeMismatch(path, "robin needs (alpha, beta) != (0, 0)")
        return ConditionSpec(kind, g, alpha, beta)
    if kind == "kedem_katchalsky":
        omega = _real(value, "omega", f"{path}.")
        if omega is not None and omega < 0:
            raise TypeMismatch(f"{path}.omega", "must be >= 0")
        return ConditionSpec(kind, omega=omega)
    return ConditionSpec(kind, g)


def _geometry(table: Mapping, base_dir: str) -> GeometrySpec:
    p = "geometry."
    builder = _str(table, "builder", p, choices=BUILDERS)
    points = _str(table, "points", p)
    lines = _str(table, "lines", p)
    if builder is None and (points is None) != (lines is None):
        raise MissingRequiredKey(p + ("lines" if points is not None else "points"))
    n_arms = _int(table, "n_arms", p, 3)
    if n_arms < 1:
        raise TypeMismatch(p + "n_arms", "must be >= 1")
    return GeometrySpec(
        builder=builder,
        points=points,
        lines=lines,
        length_scale=_real(table, "length_scale", p, default=50.0 if builder == "maze" else 1.0, positive=True),
        n_arms=n_arms,
        length=_real(table, "length", p, default=1.0, positive=True),
        base_dir=base_dir,
    )


def load_config(toml_text: str, model: str | None = None, base_dir: str = ".") -> SimulationConfig:
    """Parse and validate a configuration.

    ``model`` (e.g. from the command line) takes precedence over a top-level
    ``model`` key; the two must agree when both are given. Relative geometry
    paths are resolved against ``base_dir``.
    """
    try:
        data = tomli.loads(toml_text)
    except tomli.TOMLDecodeError as err:
        raise ConfigError("", f"invalid TOML: {err}") from err

    file_model = _str(data, "model", "")
    if model is not None and file_model is not None and model != file_model:
        raise TypeMismatch("model", f"config declares {file_model!r} but {model!r} was requested")
    model = model or file_model
    if model is None:
        raise MissingRequiredKey("model")
    if model not in MODELS:
        raise UnknownModel(f"unknown model {model!r}; choose from {sorted(MODELS)}")
    info = MODELS[model]
    eqs = info.equations

    physical = _physical(_table(data, "physical", ""), "physical.")
    for key in info.diffusivity_keys:
        if key not in physical:
            raise MissingRequiredKey(f"physical.{key}")
        if not physical[key] > 0:
            raise TypeMismatch(f"physical.{key}", "diffusivity must be > 0")
    if "k2" in physical and not physical["k2"] > 0:
        raise TypeMismatch("physical.k2", "must be > 0")
    if physical.get("m1", 0.0) < 0:
        raise TypeMismatch("physical.m1", "must be >= 0")
    if "m2" in physical and not physical["m2"] > 0:
        raise TypeMismatch("physical.m2", "must be > 0")

    t = _table(data, "time", "", required=True)
    nt = _table(t, "newton", "time.")
    try:
        newton = NewtonConfig(
            eps_abs=_real(nt, "eps_abs", "time.newton.", default=1e-9, positive=True),
            max_iterations=_int(nt, "max_iterations", "time.newton.", 25),
            strategy=_str(nt, "strategy", "time.newton.", "line_search", ("line_search", "damped")),
            alpha=_real(nt, "alpha", "time.newton.", default=1.0),
        )
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise TypeMismatch("time.newton", str(err)) from err
    time_cfg = TimeConfig(
        T_final=_real(t, "T_final", "time.", required=True, positive=True),
        dt_init=_real(t, "dt_init", "time.", required=True, positive=True),
        adaptive=_bool(t, "adaptive", "time.", False),
        dt_min=_real(t, "dt_min", "time.", positive=True),
        dt_max=_real(t, "dt_max", "time.", positive=True),
        newton=newton,
    )

    d = _table(data, "discretization", "", required=True)
    if "tau" not in d:
        raise MissingRequiredKey("discretization.tau")
    tau = d["tau"]
    if isinstance(tau, (int, float)) and not isinstance(tau, bool):
        tau = [tau] * len(eqs)
    if not isinstance(tau, list) or len(tau) != len(eqs):
        raise TypeMismatch(
            "discretization.tau", f"expected a list of {len(eqs)} numbers for model {model!r}, got {tau!r}"
        )
    for i, x in enumerate(tau):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not x > 0:
            raise TypeMismatch(f"discretization.tau[{i}]", f"expected a positive number, got {x!r}")
    disc = DiscretizationConfig(
        h_target=_real(d, "h_target", "discretization.", required=True, positive=True),
        tau=tuple(float(x) for x in tau),
        tau_scaling=_str(d, "tau_scaling", "discretization.", "diffusive", ("diffusive", "absolute")),
    )

    initial = _functions(_table(data, "initial", ""), eqs, "initial.")
    sources = _functions(_table(data, "sources", ""), eqs, "sources.")

    boundary: dict[str, dict[str, ConditionSpec]] = {}
    for tag, entries in _table(data, "boundary", "").items():
        path = f"boundary.{tag}"
        if not isinstance(entries, dict):
            raise TypeMismatch(path, "expected a table")
        conds = {}
        for key, value in entries.items():
            if key != "all" and key not in eqs:
                raise TypeMismatch(f"{path}.{key}", f"unknown equation; expected 'all' or one of {list(eqs)}")
            conds[key] = _condition(value, f"{path}.{key}")
        boundary[tag.strip().upper()[:1] + tag.strip()[1:]] = conds

    domains: dict[int, DomainOverride] = {}
    for key, entry in _table(data, "domains", "").items():
        path = f"domains.{key}"
        try:
            idx = int(key)
        except ValueError:
            raise TypeMismatch(path, "domain ids must be non-negative integers") from None
        if idx < 0:
            raise TypeMismatch(path, "domain ids must be non-negative integers")
        if not isinstance(entry, dict):
            raise TypeMismatch(path, "expected a table")
        for sub in entry:
            if sub not in ("initial", "sources", "physical", "x0"):
                raise TypeMismatch(f"{path}.{sub}", "expected one of initial, sources, physical, x0")
        domains[idx] = DomainOverride(
            initial=MappingProxyType(_functions(_table(entry, "initial", path + "."), eqs, f"{path}.initial.")),
            sources=MappingProxyType(_functions(_table(entry, "sources", path + "."), eqs, f"{path}.sources.")),
            physical=MappingProxyType(_physical(_table(entry, "physical", path + "."), f"{path}.physical.")),
            x0=_real(entry, "x0", path + "."),
        )

    return SimulationConfig(
        model=model,
        physical=MappingProxyType(physical),
        time=time_cfg,
        discretization=disc,
        initial=MappingProxyType(initial),
        sources=MappingProxyType(sources),
        boundary=MappingProxyType({k: MappingProxyType(v) for k, v in boundary.items()}),
        domains=MappingProxyType(dict(sorted(domains.items()))),
        geometry=_geometry(_table(data, "geometry", ""), base_dir),
    )


def load_config_file(path, model: str | None = None) -> SimulationConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return load_config(text, model, base_dir=os.path.dirname(os.path.abspath(path)))


def bundled_config(name: str) -> str:
    """Text of a bundled configuration (``"maze"`` or ``"ks_demo"``)."""
    return (resources.files("hdgnet") / "data" / f"{name}.toml").read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# Per-domain view and conditions


def apply_domain_overrides(config: SimulationConfig, domain_id: int, n_domains: int | None = None) -> EffectiveDomain:
    """Global values shadowed by ``[domains.<id>]``.

    ``n_domains`` bounds the valid ids; without it, any id that is not
    negative is accepted.
    """
    if isinstance(domain_id, bool) or not isinstance(domain_id, int) or domain_id < 0:
        raise UnknownDomainId(domain_id)
    if n_domains is not None and domain_id >= n_domains:
        raise UnknownDomainId(domain_id)
    over = config.domains.get(domain_id, DomainOverride())
    zero = literal(0.0)
    physical = {**config.physical, **over.physical}
    initial = tuple(over.initial.get(e, config.initial.get(e, zero)) for e in config.equations)
    sources = tuple(over.sources.get(e, config.sources.get(e, zero)) for e in config.equations)
    return EffectiveDomain(domain_id, MappingProxyType(physical), initial, sources, over.x0 or 0.0)


def build_conditions(config: SimulationConfig, geometry: NetworkGeometry) -> dict[tuple[str, int], object]:
    """Bind ``[boundary]`` entries to the geometry's connections.

    Nodes without an entry keep homogeneous Neumann (boundary) or trace
    continuity (junctions).
    """
    tags = {c.node_tag: c for c in geometry.connections}
    overrides = {}
    omega_default = config.physical.get("omega_KK")
    for tag, conds in config.boundary.items():
        if tag not in tags:
            raise ConfigError(f"boundary.{tag}", "no connection with this tag in the geometry")
        kind = tags[tag].kind
        # "all" first so per-equation entries win
        for key in sorted(conds, key=lambda k: k != "all"):
            spec = conds[key]
            path = f"boundary.{tag}.{key}"
            if (kind == "boundary") != (spec.kind in ("neumann", "dirichlet", "robin")):
                raise ConfigError(path, f"{spec.kind} condition not allowed at a {kind} node")
            try:
                cond = spec.realize(omega_default)
            except (ConfigError, InvalidCondition) as err:
                raise ConfigError(path, str(err)) from err
            targets = range(config.n_equations) if key == "all" else [config.equations.index(key)]
            for e in targets:
                overrides[(tag, e)] = cond
    return default_conditions(geometry, config.n_equations, overrides)


# ---------------------------------------------------------------------------
# Serialisation


def _source(f: ResolvedFunction):
    return f.source if f.kind != "literal" else float(f.value)


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def _condition_to_dict(spec: ConditionSpec) -> dict:
    out: dict[str, Any] = {"type": spec.kind}
    if spec.kind in ("neumann", "dirichlet", "robin"):
        out["g"] = _source(spec.g)
    if spec.kind == "robin":
        out["alpha"], out["beta"] = spec.alpha, spec.beta
    if spec.kind == "kedem_katchalsky" and spec.omega is not None:
        out["omega"] = spec.omega
    return out


def dump_config(config: SimulationConfig) -> str:
    """Serialise to TOML; ``load_config(dump_config(c))`` is equivalent to ``c``."""
    g = config.geometry
    geometry = _drop_none(
        {
            "builder": g.builder,
            "points": g.points,
            "lines": g.lines,
            "length_scale": g.length_scale,
            "n_arms": g.n_arms if g.builder == "star" else None,
            "length": g.length if g.builder in ("star", "single_arc") else None,
        }
    )
    t = config.time
    doc: dict[str, Any] = {
        "model": config.model,
        "geometry": geometry,
        "physical": dict(config.physical),
        "time": _drop_none(
            {
                "T_final": t.T_final,
                "dt_init": t.dt_init,
                "adaptive": t.adaptive,
                "dt_min": t.dt_min,
                "dt_max": t.dt_max,
                "newton": {
                    "eps_abs": t.newton.eps_abs,
                    "max_iterations": t.newton.max_iterations,
                    "strategy": t.newton.strategy,
                    "alpha": t.newton.alpha,
                },
            }
        ),
        "discretization": {
            "h_target": config.discretization.h_target,
            "tau": list(config.discretization.tau),
            "tau_scaling": config.discretization.tau_scaling,
        },
        "initial": {k: _source(f) for k, f in config.initial.items()},
        "sources": {k: _source(f) for k, f in config.sources.items()},
        "boundary": {
            tag: {k: _condition_to_dict(s) for k, s in conds.items()} for tag, conds in config.boundary.items()
        },
        "domains": {
            str(i): _drop_none(
                {
                    "initial": {k: _source(f) for k, f in o.initial.items()} or None,
                    "sources": {k: _source(f) for k, f in o.sources.items()} or None,
                    "physical": dict(o.physical) or None,
                    "x0": o.x0,
                }
            )
            for i, o in config.domains.items()
        },
    }
    return tomli_w.dumps(doc)
