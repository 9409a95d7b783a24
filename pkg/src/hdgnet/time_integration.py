"""Newton-Raphson solver, step-size controller and backward-Euler stepping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Protocol, Sequence

import numpy as np

from .hdg import Discretization, StepSystem, SystemState
from .problems import ProblemSpec

__all__ = [
    "NewtonConfig",
    "NewtonResult",
    "StepRecord",
    "DtUnderflow",
    "NewtonFailure",
    "newton_solve",
    "adapt_dt",
    "TimeStepper",
]

log = logging.getLogger(__name__)

LINE_SEARCH_MIN_ALPHA = 2.0**-20


class DtUnderflow(RuntimeError):
    pass


class NewtonFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class NewtonConfig:
    eps_abs: float = 1e-9
    max_iterations: int = 25
    strategy: str = "line_search"  # 'line_search' | 'damped'
    alpha: float = 1.0

    def __post_init__(self):
        if not self.eps_abs > 0:
            raise ValueError("eps_abs must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.strategy not in ("line_search", "damped"):
            raise ValueError(f"unknown Newton strategy {self.strategy!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("damping alpha must lie in (0, 1]")


class NewtonSystem(Protocol):
    def residual_norm(self, U: np.ndarray) -> float: ...

    def direction(self, U: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class NewtonResult:
    converged: bool
    iterations: int
    final_residual_norm: float
    state: np.ndarray


def newton_solve(system: NewtonSystem, U0, cfg: NewtonConfig = NewtonConfig()) -> NewtonResult:
    """Solve ``R(U) = 0``; ``system.direction(U)`` returns ``dU`` with ``J dU = -R``.

    Nonconvergence is reported through ``converged=False``, never raised.
    """
    U = np.array(U0, dtype=float, copy=True)
    norm = system.residual_norm(U)
    it = 0
    while math.isfinite(norm) and norm >= cfg.eps_abs and it < cfg.max_iterations:
        dU = system.direction(U)
        if cfg.strategy == "damped":
            U = U + cfg.alpha * dU
            norm = system.residual_norm(U)
        else:
            alpha = 1.0
            while True:
                trial = U + alpha * dU
                trial_norm = system.residual_norm(trial)
                if trial_norm < norm:
                    U, norm = trial, trial_norm
                    break
                alpha *= 0.5
                if alpha < LINE_SEARCH_MIN_ALPHA:
                    return NewtonResult(False, it + 1, norm, U)
        it += 1
    converged = math.isfinite(norm) and norm < cfg.eps_abs
    return NewtonResult(converged, it, norm, U)


def adapt_dt(
    dt: float,
    newton_iterations: int | None,
    failed: bool,
    dt_min: float = 0.0,
    dt_max: float = math.inf,
) -> tuple[float, bool]:
    """Iteration-count step controller. Returns ``(dt_next, retry)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if failed:
        new = 0.5 * dt
        if new < dt_min:
            raise DtUnderflow(f"time step {new:.3e} fell below dt_min={dt_min:.3e}")
        return min(new, dt_max), True
    n = int(newton_iterations)
    if n <= 8:
        new = 1.2 * dt
    elif n <= 14:
        new = dt
    else:
        new = 0.8 * dt
    return min(max(new, dt_min), dt_max), False


@dataclass(frozen=True, eq=False)
class StepRecord:
    step_number: int
    time: float
    dt: float
    newton_iterations: int
    accepted: bool
    residual_norm: float = 0.0
    state: SystemState | None = None


class TimeStepper:
    """Backward-Euler stepping of an HDG network problem.

    ``advance`` yields one :class:`StepRecord` per attempt; accepted records
    carry the new state, and ``self.state`` always holds the latest accepted
    state.
    """

    def __init__(
        self,
        disc: Discretization,
        problems: Sequence[ProblemSpec],
        conditions: Mapping,
        newton: NewtonConfig = NewtonConfig(),
        threads: int = 1,
    ):
        self.disc = disc
        self.problems = list(problems)
        self.conditions = conditions
        self.newton = newton
        self.threads = threads
        self.state: SystemState | None = None

    def solve_step(self, prev: SystemState, dt: float) -> tuple[NewtonResult, SystemState]:
        t_next = prev.time + dt
        system = StepSystem(self.disc, self.problems, self.conditions, prev, dt, t_next, self.threads)
        result = newton_solve(system, prev.to_vector(), self.newton)
        return result, SystemState.from_vector(self.disc, result.state, t_next)

    def advance(
        self,
        initial: SystemState,
        n_steps: int | None = None,
        dt: float | None = None,
        T_final: float | None = None,
        adaptive: bool = False,
        dt_min: float | None = None,
        dt_max: float | None = None,
        max_steps: int | None = None,
    ) -> Iterator[StepRecord]:
        if dt is None or not dt > 0:
            raise ValueError("dt must be positive")
        self.state = initial
        if not adaptive:
            if n_steps is None:
                if T_final is None:
                    raise ValueError("fixed stepping needs n_steps or T_final")
                n_steps = max(1, round((T_final - initial.time) / dt))
            yield from self._fixed(initial, n_steps, dt)
        else:
            if T_final is None:
                raise ValueError("adaptive stepping needs T_final")
            dt_min = 1e-6 * dt if dt_min is None else dt_min
            dt_max = 1e2 * dt if dt_max is None else dt_max
            yield from self._adaptive(initial, dt, T_final, dt_min, dt_max, max_steps)

    def _fixed(self, initial: SystemState, n_steps: int, dt: float) -> Iterator[StepRecord]:
        prev = initial
        t0 = initial.time
        for k in range(1, n_steps + 1):
            step_dt = (t0 + k * dt) - prev.time
            result, new = self.solve_step(prev, step_dt)
            if not result.converged:
                yield StepRecord(k, prev.time, step_dt, result.iterations, False, result.final_residual_norm)
                raise NewtonFailure(
                    f"Newton did not converge at step {k} (t={prev.time + step_dt:g}, "
                    f"|R|={result.final_residual_norm:.3e})"
                )
            prev = new
            self.state = new
            yield StepRecord(k, new.time, step_dt, result.iterations, True, result.final_residual_norm, new)

    def _adaptive(self, initial, dt, T_final, dt_min, dt_max, max_steps) -> Iterator[StepRecord]:
        prev = initial
        step = 0
        eps_t = 1e-12 * max(1.0, abs(T_final))
        while prev.time < T_final - eps_t:
            if max_steps is not None and step >= max_steps:
                return
            step_dt = dt
            last = prev.time + dt >= T_final - eps_t
            if last:
                step_dt = T_final - prev.time
            result, new = self.solve_step(prev, step_dt)
            if not result.converged:
                yield StepRecord(step + 1, prev.time, step_dt, result.iterations, False, result.final_residual_norm)
                dt, _ = adapt_dt(step_dt, None, True, dt_min, dt_max)
                log.info("step %d failed at t=%g; retrying with dt=%g", step + 1, prev.time, dt)
                continue
            if last:
                new = new.with_time(T_final)
            step += 1
            prev = new
            self.state = new
            yield StepRecord(step, new.time, step_dt, result.iterations, True, result.final_residual_norm, new)
            dt, _ = adapt_dt(dt, result.iterations, False, dt_min, dt_max)
