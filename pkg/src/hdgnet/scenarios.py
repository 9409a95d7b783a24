"""Pipeline assembly from a configuration, and the heat-equation convergence scenario."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import SimulationConfig, build_conditions
from .geometry import NetworkGeometry, single_arc
from .hdg import Discretization, SystemState, build_discretization, default_conditions, initial_state
from .problems import ProblemSpec, diffusion_problem
from .time_integration import NewtonConfig, TimeStepper

__all__ = [
    "Simulation",
    "setup_simulation",
    "heat_exact",
    "heat_l2_error",
    "observed_orders",
    "fitted_order",
    "SweepResult",
    "spatial_sweep",
    "temporal_sweep",
]


@dataclass(frozen=True, eq=False)
class Simulation:
    config: SimulationConfig
    geometry: NetworkGeometry
    disc: Discretization
    problems: tuple[ProblemSpec, ...]
    conditions: dict
    initial: SystemState

    def stepper(self, threads: int = 1) -> TimeStepper:
        return TimeStepper(self.disc, self.problems, self.conditions, self.config.time.newton, threads)


def setup_simulation(
    config: SimulationConfig, geometry: NetworkGeometry | None = None, h_target: float | None = None
) -> Simulation:
    """Geometry -> conditions -> problems -> discretisation -> initial state."""
    geometry = geometry if geometry is not None else config.build_geometry()
    conditions = build_conditions(config, geometry)
    problems = tuple(config.problems(geometry))
    disc = build_discretization(geometry, h_target or config.discretization.h_target, problems[0].flux_orders)
    init = initial_state(disc, problems, config.initial_functions(geometry))
    return Simulation(config, geometry, disc, problems, conditions, init)


# ---------------------------------------------------------------------------
# Heat equation on [0, L] with homogeneous Neumann ends


def heat_exact(s, t, D: float = 1.0, L: float = 1.0):
    k = math.pi / L
    return np.exp(-D * k * k * t) * np.cos(k * np.asarray(s, dtype=float))


def heat_l2_error(state: SystemState, disc: Discretization, D: float = 1.0, L: float = 1.0) -> float:
    x, w = np.polynomial.legendre.leggauss(6)
    x, w = 0.5 * (x + 1.0), 0.5 * w
    mesh = disc.meshes[0]
    u = state.u(disc, 0, 0)
    h = mesh.h[:, None]
    s = mesh.left[:, None] + h * x[None, :]
    uh = u[:, :1] * (1.0 - x) + u[:, 1:] * x
    err = (uh - heat_exact(s, state.time, D, L)) ** 2
    return float(math.sqrt(np.sum(h * w * err)))


def _heat_run(n_el: int, n_steps: int, T: float, D: float, L: float, problem: ProblemSpec) -> float:
    geo = single_arc(L)
    disc = build_discretization(geo, L / n_el, problem.flux_orders)
    init = initial_state(disc, [problem], [lambda s, t: heat_exact(s, 0.0, D, L)])
    stepper = TimeStepper(disc, [problem], default_conditions(geo, 1), NewtonConfig(eps_abs=1e-12))
    for _ in stepper.advance(init, n_steps=n_steps, dt=T / n_steps):
        pass
    return heat_l2_error(stepper.state, disc, D, L)


def observed_orders(sizes: Sequence[float], errors: Sequence[float]) -> np.ndarray:
    """Pairwise rates ``log(e_i / e_{i+1}) / log(h_i / h_{i+1})``."""
    sizes, errors = np.asarray(sizes, float), np.asarray(errors, float)
    return np.log(errors[:-1] / errors[1:]) / np.log(sizes[:-1] / sizes[1:])


def fitted_order(sizes: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of ``log e`` against ``log h``."""
    return float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])


@dataclass(frozen=True)
class SweepResult:
    sizes: tuple[float, ...]
    errors: tuple[float, ...]
    orders: tuple[float, ...]
    fitted: float


def _result(sizes, errors) -> SweepResult:
    return SweepResult(
        tuple(sizes), tuple(errors), tuple(float(o) for o in observed_orders(sizes, errors)), fitted_order(sizes, errors)
    )


def spatial_sweep(
    levels: int = 4,
    n0: int = 4,
    T: float = 0.05,
    dt_factor: float = 0.1,
    D: float = 1.0,
    L: float = 1.0,
    tau: float = 1.0,
    flux_order: int = 1,
    tau_scaling: str = "diffusive",
) -> SweepResult:
    """h-refinement with ``dt = dt_factor * h^2`` (rounded to divide ``T``)."""
    if levels < 2:
        raise ValueError("a convergence sweep needs at least 2 levels")
    problem = diffusion_problem(D, tau, flux_order, tau_scaling=tau_scaling)
    sizes, errors = [], []
    for k in range(levels):
        n = n0 * 2**k
        h = L / n
        n_steps = max(1, math.ceil(T / (dt_factor * h * h)))
        sizes.append(h)
        errors.append(_heat_run(n, n_steps, T, D, L, problem))
    return _result(sizes, errors)


def temporal_sweep(
    levels: int = 4,
    n_el: int = 128,
    steps0: int = 4,
    T: float = 0.1,
    D: float = 1.0,
    L: float = 1.0,
    tau: float = 1.0,
    flux_order: int = 1,
    tau_scaling: str = "diffusive",
) -> SweepResult:
    """dt-refinement at fixed fine mesh."""
    if levels < 2:
        raise ValueError("a convergence sweep needs at least 2 levels")
    problem = diffusion_problem(D, tau, flux_order, tau_scaling=tau_scaling)
    sizes, errors = [], []
    for k in range(levels):
        n_steps = steps0 * 2**k
        sizes.append(T / n_steps)
        errors.append(_heat_run(n_el, n_steps, T, D, L, problem))
    return _result(sizes, errors)
