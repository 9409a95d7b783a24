"""Equation systems: Keller-Segel (2 equations) and Organ-on-Chip (4 equations).

Equation ordering is fixed: KS ``(u, phi)``; OoC ``(u, omega, v, phi)``.
Reaction terms are point-wise; the chemotactic drift of ``u`` is a flux
term and is assembled by :mod:`hdgnet.hdg`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .expressions import ResolvedFunction, literal, register_builtin

__all__ = [
    "UnknownModel",
    "PoleCrossing",
    "ChemotaxisSensitivity",
    "TumourSuppression",
    "ProblemSpec",
    "MODELS",
    "sensitivity_eval",
    "reaction_eval",
    "build_problem",
    "diffusion_problem",
]


class UnknownModel(ValueError):
    pass


class PoleCrossing(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelInfo:
    equations: tuple[str, ...]
    diffusivity_keys: tuple[str, ...]
    flux_orders: tuple[int, ...]
    coefficient_keys: tuple[str, ...]
    attractant: int  # equation index driving chemotaxis of equation 0


MODELS: dict[str, ModelInfo] = {
    "ks": ModelInfo(("u", "phi"), ("nu", "mu"), (0, 1), ("a", "b"), 1),
    "ooc": ModelInfo(
        ("u", "omega", "v", "phi"),
        ("nu", "epsilon", "sigma", "mu"),
        (0, 1, 1, 1),
        ("a", "b", "c", "d"),
        3,
    ),
}


@dataclass(frozen=True)
class ChemotaxisSensitivity:
    kind: str  # 'receptor' | 'constant'
    k1: float = 0.0
    k2: float = 1.0
    chi0: float = 0.0

    @classmethod
    def receptor(cls, k1: float, k2: float) -> "ChemotaxisSensitivity":
        if not k2 > 0:
            raise ValueError("k2 must be positive")
        return cls("receptor", k1=float(k1), k2=float(k2))

    @classmethod
    def constant(cls, chi0: float) -> "ChemotaxisSensitivity":
        return cls("constant", chi0=float(chi0))

    @property
    def active(self) -> bool:
        return (self.kind == "receptor" and self.k1 != 0.0) or (self.kind == "constant" and self.chi0 != 0.0)

    def __call__(self, phi):
        """Return ``(chi(phi), chi'(phi))`` with the shape of ``phi``."""
        phi = np.asarray(phi, dtype=float)
        if self.kind == "constant":
            return np.full(phi.shape, self.chi0), np.zeros(phi.shape)
        base = self.k2 + phi
        if np.any(base <= 0):
            raise PoleCrossing(f"chi pole: k2 + phi <= 0 (min phi = {phi.min():.3e})")
        return self.k1 / base**2, -2.0 * self.k1 / base**3


@dataclass(frozen=True)
class TumourSuppression:
    m1: float = 0.0
    m2: float = 1.0

    def __call__(self, omega):
        """Return ``(lambda(omega), lambda'(omega))``."""
        omega = np.asarray(omega, dtype=float)
        if self.m1 == 0.0:
            return np.zeros(omega.shape), np.zeros(omega.shape)
        base = self.m2 + omega
        if np.any(base <= 0):
            raise PoleCrossing("lambda pole: m2 + omega <= 0")
        return self.m1 / base, -self.m1 / base**2


def sensitivity_eval(chi: ChemotaxisSensitivity, phi: float) -> tuple[float, float]:
    val, der = chi(phi)
    return float(val), float(der)


@dataclass(frozen=True)
class ProblemSpec:
    model: str
    equations: tuple[str, ...]
    diffusivity: tuple[float, ...]
    flux_orders: tuple[int, ...]
    tau: tuple[float, ...]
    sources: tuple[ResolvedFunction, ...]
    coefficients: Mapping[str, float] = field(default_factory=dict)
    sensitivity: ChemotaxisSensitivity | None = None
    suppression: TumourSuppression | None = None
    attractant: int | None = None
    tau_scaling: str = "diffusive"  # 'absolute' | 'diffusive' (tau * D / h)

    def __post_init__(self):
        if self.tau_scaling not in ("absolute", "diffusive"):
            raise ValueError(f"unknown tau scaling {self.tau_scaling!r}")
        n = len(self.equations)
        for name in ("diffusivity", "flux_orders", "tau", "sources"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries")
        if any(not d > 0 for d in self.diffusivity):
            raise ValueError("diffusivities must be strictly positive")
        if any(not t > 0 for t in self.tau):
            raise ValueError("tau must be strictly positive")
        if self.attractant is not None and self.flux_orders[self.attractant] != 1:
            raise ValueError("chemotaxis needs a P1 flux for the attractant equation")

    @property
    def n_equations(self) -> int:
        return len(self.equations)

    def stabilization(self, e: int, h: np.ndarray) -> np.ndarray:
        """Per-element stabilisation parameter of equation ``e``."""
        h = np.asarray(h, dtype=float)
        if self.tau_scaling == "diffusive":
            return self.tau[e] * self.diffusivity[e] / h
        return np.full(h.shape, self.tau[e])

    @property
    def has_chemotaxis(self) -> bool:
        return self.attractant is not None and self.sensitivity is not None and self.sensitivity.active

    def coef(self, key: str) -> float:
        return float(self.coefficients.get(key, 0.0))

    def reactions(self, U: np.ndarray, s, t: float):
        """Reaction values and Jacobian at points.

        ``U`` has shape ``(..., n_eq)``; returns ``R`` of the same shape and
        ``dR`` of shape ``(..., n_eq, n_eq)`` with ``dR[..., e, k] = dR_e/dU_k``.
        """
        U = np.asarray(U, dtype=float)
        n = self.n_equations
        R = np.zeros(U.shape)
        dR = np.zeros(U.shape + (n,))
        for e, f in enumerate(self.sources):
            if not f.is_zero:
                R[..., e] += f(s, t)
        if self.model == "ks":
            a, b = self.coef("a"), self.coef("b")
            R[..., 1] += b * U[..., 0] - a * U[..., 1]
            dR[..., 1, 0] = b
            dR[..., 1, 1] = -a
        elif self.model == "ooc":
            a, b, c, d = (self.coef(k) for k in "abcd")
            u, omega, v, phi = (U[..., k] for k in range(4))
            R[..., 1] += -c * omega + d * u
            dR[..., 1, 1] = -c
            dR[..., 1, 0] = d
            lam, dlam = (self.suppression or TumourSuppression())(omega)
            R[..., 2] += -lam * v
            dR[..., 2, 2] = -lam
            dR[..., 2, 1] = -dlam * v
            R[..., 3] += -a * phi + b * u
            dR[..., 3, 3] = -a
            dR[..., 3, 0] = b
        return R, dR


def reaction_eval(spec: ProblemSpec, eq_index: int, state: Sequence[float], s: float = 0.0, t: float = 0.0):
    """Value and partials of reaction ``eq_index`` at a single point."""
    if not 0 <= eq_index < spec.n_equations:
        raise IndexError(f"equation index {eq_index} out of range for {spec.model}")
    state = np.asarray(state, dtype=float)
    if state.shape != (spec.n_equations,):
        raise ValueError(f"state must have {spec.n_equations} entries")
    R, dR = spec.reactions(state, s, t)
    return float(R[eq_index]), dR[eq_index].copy()


def build_problem(
    model: str,
    physical: Mapping[str, float],
    tau: Sequence[float],
    sources: Mapping[str, ResolvedFunction] | None = None,
    tau_scaling: str = "diffusive",
) -> ProblemSpec:
    """Assemble a :class:`ProblemSpec` from a flat parameter map.

    Missing reaction/coupling coefficients default to 0. Chemotaxis uses the
    receptor-saturation law when ``k1`` is given, a constant ``chi0`` when
    that is given, and is off otherwise.
    """
    if model not in MODELS:
        raise UnknownModel(f"unknown model {model!r}; choose from {sorted(MODELS)}")
    info = MODELS[model]
    missing = [k for k in info.diffusivity_keys if k not in physical]
    if missing:
        raise KeyError(f"missing diffusivity {missing[0]!r} for model {model!r}")
    sources = sources or {}
    if "k1" in physical:
        chi = ChemotaxisSensitivity.receptor(physical["k1"], physical.get("k2", 1.0))
    else:
        chi = ChemotaxisSensitivity.constant(physical.get("chi0", 0.0))
    suppression = None
    if model == "ooc":
        suppression = TumourSuppression(float(physical.get("m1", 0.0)), float(physical.get("m2", 1.0)))
    return ProblemSpec(
        model=model,
        equations=info.equations,
        diffusivity=tuple(float(physical[k]) for k in info.diffusivity_keys),
        flux_orders=info.flux_orders,
        tau=tuple(float(x) for x in tau),
        sources=tuple(sources.get(name, literal(0.0)) for name in info.equations),
        coefficients={k: float(physical.get(k, 0.0)) for k in info.coefficient_keys},
        sensitivity=chi,
        suppression=suppression,
        attractant=info.attractant,
        tau_scaling=tau_scaling,
    )


def diffusion_problem(
    D: float = 1.0, tau: float = 1.0, flux_order: int = 1, source=None, tau_scaling: str = "diffusive"
) -> ProblemSpec:
    """Single linear diffusion equation, used by the convergence scenarios."""
    return ProblemSpec(
        model="diffusion",
        equations=("u",),
        diffusivity=(float(D),),
        flux_orders=(flux_order,),
        tau=(float(tau),),
        sources=(source or literal(0.0),),
        tau_scaling=tau_scaling,
    )


register_builtin("unit_bump", lambda s, t=0.0: np.exp(-50.0 * (np.asarray(s, dtype=float) - 0.5) ** 2))
register_builtin("cosine_mode", lambda s, t=0.0: np.cos(np.pi * np.asarray(s, dtype=float)))
