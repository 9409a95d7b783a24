"""HDG discretisation on networks: local assembly, static condensation,
global trace/multiplier system, constraints and bulk recovery.

Unknown layout
--------------
* bulk: per arc an ``(n_el, n_local)`` array; for each equation ``e`` the
  columns ``offset[e] + (0, 1)`` hold the nodal P1 values of ``u`` and the
  following ``n_flux[e]`` columns the flux coefficients.
* traces: per arc, per equation, one value per mesh node (arc-end nodes are
  not shared between arcs).
* multipliers: one per (arc, equation, constrained node). Each equals the
  arc's outward numerical flux at that node.

The global residual rows are, in order, one flux-balance row per trace
(minus the sum of adjacent elements' outward numerical fluxes, plus the
multiplier when the node is constrained) followed by one constraint row per
multiplier.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elements import reference_matrices
from .expressions import ResolvedFunction, literal, resolve
from .geometry import NetworkGeometry
from .problems import PoleCrossing, ProblemSpec

__all__ = [
    "SingularLocalBlock",
    "LinearSolveFailure",
    "MissingCondition",
    "UnsupportedKKArity",
    "InvalidCondition",
    "Neumann",
    "Dirichlet",
    "Robin",
    "TraceContinuity",
    "KedemKatchalsky",
    "ArcMesh",
    "Discretization",
    "SystemState",
    "LocalBlocks",
    "CondensedElement",
    "GlobalSystem",
    "build_discretization",
    "default_conditions",
    "initial_state",
    "assemble_local",
    "condense",
    "recover_bulk",
    "constraint_rows",
    "assemble_global",
    "assemble_monolithic",
    "StepSystem",
]


class SingularLocalBlock(ArithmeticError):
    pass


class LinearSolveFailure(ArithmeticError):
    pass


class MissingCondition(KeyError):
    pass


class UnsupportedKKArity(ValueError):
    pass


class InvalidCondition(ValueError):
    pass


# ---------------------------------------------------------------------------
# Conditions


@dataclass(frozen=True)
class Neumann:
    """Prescribed outward flux ``lambda = g``."""

    g: ResolvedFunction = field(default_factory=lambda: literal(0.0))


@dataclass(frozen=True)
class Dirichlet:
    g: ResolvedFunction = field(default_factory=lambda: literal(0.0))


@dataclass(frozen=True)
class Robin:
    """``alpha * u_hat + beta * lambda = g``."""

    alpha: float
    beta: float
    g: ResolvedFunction = field(default_factory=lambda: literal(0.0))

    def __post_init__(self):
        if self.alpha == 0.0 and self.beta == 0.0:
            raise InvalidCondition("Robin condition needs (alpha, beta) != (0, 0)")


@dataclass(frozen=True)
class TraceContinuity:
    pass


@dataclass(frozen=True)
class KedemKatchalsky:
    omega: float

    def __post_init__(self):
        if self.omega < 0:
            raise InvalidCondition("Kedem-Katchalsky permeability must be >= 0")


BOUNDARY_CONDITIONS = (Neumann, Dirichlet, Robin)
INTERFACE_CONDITIONS = (TraceContinuity, KedemKatchalsky)


def default_conditions(
    geometry: NetworkGeometry,
    n_equations: int,
    overrides: Mapping[tuple[str, int], object] | None = None,
) -> dict[tuple[str, int], object]:
    """Homogeneous Neumann at boundary nodes, trace continuity elsewhere."""
    out: dict[tuple[str, int], object] = {}
    for conn in geometry.connections:
        for e in range(n_equations):
            out[(conn.node_tag, e)] = Neumann() if conn.kind == "boundary" else TraceContinuity()
    for key, cond in (overrides or {}).items():
        if key not in out:
            raise KeyError(f"no connection {key[0]!r} in geometry")
        out[key] = cond
    return out


# ---------------------------------------------------------------------------
# Discretisation


@dataclass(frozen=True, eq=False)
class ArcMesh:
    arc_id: int
    nodes: np.ndarray  # local coordinates, strictly increasing

    @property
    def n_el(self) -> int:
        return len(self.nodes) - 1

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def left(self) -> np.ndarray:
        return self.nodes[:-1]

    def node_index(self, s: float) -> int:
        i = int(np.argmin(np.abs(self.nodes - s)))
        return i


@dataclass(frozen=True)
class Slot:
    conn: int
    eq: int
    arc: int
    node: int
    trace: int


@dataclass(frozen=True, eq=False)
class Discretization:
    geometry: NetworkGeometry
    h_target: float
    meshes: tuple[ArcMesh, ...]
    flux_orders: tuple[int, ...]
    trace_offset: np.ndarray  # (n_arcs, n_eq)
    n_trace: int
    slots: tuple[Slot, ...]
    slot_index: Mapping[tuple[int, int, int], int]  # (conn, eq, member) -> slot
    bulk_offset: np.ndarray  # (n_arcs + 1,) into the flat bulk vector

    @property
    def n_equations(self) -> int:
        return len(self.flux_orders)

    @property
    def n_mult(self) -> int:
        return len(self.slots)

    @property
    def n_global(self) -> int:
        return self.n_trace + self.n_mult

    @property
    def n_flux(self) -> tuple[int, ...]:
        return tuple(1 if fo == 0 else 2 for fo in self.flux_orders)

    @property
    def eq_offset(self) -> tuple[int, ...]:
        offs, k = [], 0
        for nq in self.n_flux:
            offs.append(k)
            k += 2 + nq
        return tuple(offs)

    @property
    def n_local(self) -> int:
        return sum(2 + nq for nq in self.n_flux)

    @property
    def n_bulk(self) -> int:
        return int(self.bulk_offset[-1])

    @property
    def n_elements(self) -> int:
        return sum(m.n_el for m in self.meshes)

    def u_cols(self, e: int) -> np.ndarray:
        o = self.eq_offset[e]
        return np.array([o, o + 1])

    def q_cols(self, e: int) -> np.ndarray:
        o = self.eq_offset[e] + 2
        return np.arange(o, o + self.n_flux[e])

    def trace_index(self, arc: int, eq: int, node: int) -> int:
        return int(self.trace_offset[arc, eq]) + node

    def local_trace_index(self, arc: int) -> np.ndarray:
        """``(n_el, 2 n_eq)`` global trace index of each element's endpoint traces."""
        n_el = self.meshes[arc].n_el
        k = np.arange(n_el)
        cols = []
        for e in range(self.n_equations):
            base = self.trace_offset[arc, e]
            cols += [base + k, base + k + 1]
        return np.stack(cols, axis=1)


def _mesh_nodes(length: float, x0: float, h_target: float, interior: Sequence[float]) -> np.ndarray:
    n = max(1, math.ceil(length / h_target - 1e-10))
    nodes = x0 + length * np.arange(n + 1) / n
    for s in sorted(interior):
        i = int(np.argmin(np.abs(nodes - s)))
        spacing = length / n
        if 0 < i < len(nodes) - 1 and abs(nodes[i] - s) < 0.25 * spacing:
            nodes[i] = s
        elif abs(nodes[i] - s) > 1e-12 * length:
            nodes = np.sort(np.append(nodes, s))
    return nodes


def build_discretization(
    geometry: NetworkGeometry, h_target: float, flux_orders: Sequence[int] = (1,)
) -> Discretization:
    """Uniform ``ceil(L / h_target)`` split per arc with T-junction nodes snapped in."""
    if not h_target > 0:
        raise ValueError("h_target must be positive")
    flux_orders = tuple(int(f) for f in flux_orders)
    n_eq = len(flux_orders)
    interior: dict[int, list[float]] = {a.id: [] for a in geometry.arcs}
    for conn in geometry.connections:
        for m in conn.members:
            if m.where == "interior":
                interior[m.arc_id].append(m.s)
    meshes = tuple(
        ArcMesh(a.id, _mesh_nodes(a.length, a.x0, h_target, interior[a.id])) for a in geometry.arcs
    )
    trace_offset = np.zeros((len(meshes), n_eq), dtype=int)
    k = 0
    for a, mesh in enumerate(meshes):
        for e in range(n_eq):
            trace_offset[a, e] = k
            k += len(mesh.nodes)
    n_trace = k

    slots: list[Slot] = []
    slot_index: dict[tuple[int, int, int], int] = {}
    for ci, conn in enumerate(geometry.connections):
        for e in range(n_eq):
            for mi, m in enumerate(conn.members):
                mesh = meshes[m.arc_id]
                if m.where == "start":
                    node = 0
                elif m.where == "end":
                    node = mesh.n_el
                else:
                    node = mesh.node_index(m.s)
                slot_index[(ci, e, mi)] = len(slots)
                slots.append(Slot(ci, e, m.arc_id, node, int(trace_offset[m.arc_id, e]) + node))

    n_local = sum(2 + (1 if fo == 0 else 2) for fo in flux_orders)
    bulk_offset = np.concatenate([[0], np.cumsum([m.n_el * n_local for m in meshes])]).astype(int)
    return Discretization(
        geometry=geometry,
        h_target=float(h_target),
        meshes=meshes,
        flux_orders=flux_orders,
        trace_offset=trace_offset,
        n_trace=n_trace,
        slots=tuple(slots),
        slot_index=slot_index,
        bulk_offset=bulk_offset,
    )


# ---------------------------------------------------------------------------
# State


@dataclass(frozen=True, eq=False)
class SystemState:
    traces: np.ndarray
    multipliers: np.ndarray
    bulk: tuple[np.ndarray, ...]  # per arc (n_el, n_local)
    time: float = 0.0

    def to_vector(self) -> np.ndarray:
        parts = [b.ravel() for b in self.bulk] + [self.traces, self.multipliers]
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def from_vector(cls, disc: Discretization, vec: np.ndarray, time: float = 0.0) -> "SystemState":
        vec = np.asarray(vec, dtype=float)
        bulk = tuple(
            vec[disc.bulk_offset[a] : disc.bulk_offset[a + 1]].reshape(m.n_el, disc.n_local).copy()
            for a, m in enumerate(disc.meshes)
        )
        nb = disc.n_bulk
        return cls(vec[nb : nb + disc.n_trace].copy(), vec[nb + disc.n_trace :].copy(), bulk, time)

    def with_time(self, time: float) -> "SystemState":
        return SystemState(self.traces, self.multipliers, self.bulk, time)

    def u(self, disc: Discretization, arc: int, eq: int) -> np.ndarray:
        """``(n_el, 2)`` nodal bulk values of equation ``eq`` on ``arc``."""
        return self.bulk[arc][:, disc.u_cols(eq)]

    def q(self, disc: Discretization, arc: int, eq: int) -> np.ndarray:
        return self.bulk[arc][:, disc.q_cols(eq)]

    def arc_traces(self, disc: Discretization, arc: int, eq: int) -> np.ndarray:
        o = disc.trace_offset[arc, eq]
        return self.traces[o : o + len(disc.meshes[arc].nodes)]


def initial_state(
    disc: Discretization,
    problems: Sequence[ProblemSpec],
    initial: Sequence[Sequence] | Sequence,
    time: float = 0.0,
) -> SystemState:
    """Interpolate initial data into bulk and traces.

    ``initial[a][e]`` (or ``initial[e]`` for all arcs) is a callable of
    ``(s, t)``. Flux coefficients are set from the discrete flux equation.
    """
    per_arc = len(initial) == len(disc.meshes) and len(initial) > 0 and isinstance(initial[0], (list, tuple))
    traces = np.zeros(disc.n_trace)
    bulk = []
    for a, mesh in enumerate(disc.meshes):
        funcs = initial[a] if per_arc else initial
        B = np.zeros((mesh.n_el, disc.n_local))
        h = mesh.h
        for e in range(disc.n_equations):
            f = funcs[e]
            f = resolve(f) if not callable(f) else f
            vals = np.asarray(f(mesh.nodes, time), dtype=float) * np.ones(len(mesh.nodes))
            u = np.stack([vals[:-1], vals[1:]], axis=1)
            B[:, disc.u_cols(e)] = u
            o = disc.trace_offset[a, e]
            traces[o : o + len(vals)] = vals
            D = problems[a].diffusivity[e]
            ref = reference_matrices(disc.flux_orders[e])
            rhs = u @ ref.E - (vals[:-1, None] * -ref.Ntilde[0] + vals[1:, None] * ref.Ntilde[1])
            q = np.linalg.solve(ref.Mq[None, :, :] * (h / D)[:, None, None], rhs[..., None])[..., 0]
            B[:, disc.q_cols(e)] = q
        bulk.append(B)
    return SystemState(traces, np.zeros(disc.n_mult), tuple(bulk), time)


# ---------------------------------------------------------------------------
# Local assembly


@dataclass(frozen=True, eq=False)
class LocalBlocks:
    """Linearised element system ``[[A_ii, A_ib], [A_bi, A_bb]] [dx; dy] = [f_i; f_b]``.

    Arrays carry a leading element axis. ``dy`` are the element's endpoint
    traces ordered ``(eq0 L, eq0 R, eq1 L, ...)``; the ``b`` rows are the
    element's contributions to the flux-balance rows of those traces.
    ``G`` and ``F`` are the bulk residual and the outward numerical fluxes.
    """

    A_ii: np.ndarray
    A_ib: np.ndarray
    A_bi: np.ndarray
    A_bb: np.ndarray
    f_i: np.ndarray
    f_b: np.ndarray


def assemble_local(
    disc: Discretization,
    arc: int,
    problem: ProblemSpec,
    bulk: np.ndarray,
    prev_bulk: np.ndarray,
    traces_local: np.ndarray,
    dt: float,
    t_next: float,
) -> LocalBlocks:
    """Backward-Euler HDG element system linearised about the current iterate."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    mesh = disc.meshes[arc]
    h = mesh.h
    n = mesh.n_el
    ne = disc.n_equations
    nl = disc.n_local
    x, y = bulk, traces_local
    G = np.zeros((n, nl))
    F = np.zeros((n, 2 * ne))
    Gx = np.zeros((n, nl, nl))
    Gy = np.zeros((n, nl, 2 * ne))
    Fx = np.zeros((n, 2 * ne, nl))
    Fy = np.zeros((n, 2 * ne, 2 * ne))
    refs = [reference_matrices(fo) for fo in disc.flux_orders]
    ref1 = reference_matrices(1)
    eye2 = np.eye(2)

    for e in range(ne):
        ref = refs[e]
        iu, iq = disc.u_cols(e), disc.q_cols(e)
        iy = np.array([2 * e, 2 * e + 1])
        u, q, uo = x[:, iu], x[:, iq], prev_bulk[:, iu]
        yb = y[:, iy]
        D = problem.diffusivity[e]
        tau = problem.stabilization(e, h)
        tI = tau[:, None, None] * eye2
        GbNt = ref.Gb @ ref.Ntilde

        flux = q @ GbNt.T + tau[:, None] * (u - yb)
        F[:, iy] += flux
        Fx[:, iy[:, None], iq] += GbNt
        Fx[:, iy[:, None], iu] += tI
        Fy[:, iy[:, None], iy] += -tI

        G[:, iu] += (h[:, None] / dt) * ((u - uo) @ ref.M.T) - q @ ref.C.T + flux
        Gx[:, iu[:, None], iu] += (h[:, None, None] / dt) * ref.M + tI
        Gx[:, iu[:, None], iq] += -ref.C + GbNt
        Gy[:, iu[:, None], iy] += -tI

        G[:, iq] += (h[:, None] / D) * (q @ ref.Mq.T) - u @ ref.E + yb @ (ref.Ntilde.T @ ref.Gb).T
        Gx[:, iq[:, None], iq] += (h[:, None, None] / D) * ref.Mq
        Gx[:, iq[:, None], iu] += -ref.E.T
        Gy[:, iq[:, None], iy] += ref.Ntilde.T @ ref.Gb

    # reactions at quadrature points
    V, Q, xi = ref1.V, ref1.Q, ref1.nodes
    Uq = np.stack([x[:, disc.u_cols(e)] @ V.T for e in range(ne)], axis=-1)  # (n, nqp, ne)
    s_q = mesh.left[:, None] + h[:, None] * xi[None, :]
    R, dR = problem.reactions(Uq, s_q, t_next)
    for e in range(ne):
        iu = disc.u_cols(e)
        if np.any(R[..., e]):
            G[:, iu] -= h[:, None] * (R[..., e] @ Q.T)
        for k in range(ne):
            d = dR[:, :, e, k]
            if np.any(d):
                Gx[:, iu[:, None], disc.u_cols(k)] -= h[:, None, None] * np.einsum("ik,nk,kj->nij", Q, d, V)

    if problem.has_chemotaxis:
        _chemotaxis(disc, problem, x, y, G, F, Gx, Gy, Fx, Fy)

    return LocalBlocks(A_ii=Gx, A_ib=Gy, A_bi=-Fx, A_bb=-Fy, f_i=-G, f_b=F)


def _chemotaxis(disc, problem, x, y, G, F, Gx, Gy, Fx, Fy):
    """Drift ``-d/ds[chi(phi) u phi_s]`` of equation 0 with ``phi_s = -q_phi / mu``."""
    a = problem.attractant
    mu = problem.diffusivity[a]
    ref = reference_matrices(1)
    w, V, dphi = ref.weights, ref.V, ref.dphi
    iu, ip, iqp = disc.u_cols(0), disc.u_cols(a), disc.q_cols(a)
    uk = x[:, iu] @ V.T
    pk = x[:, ip] @ V.T
    qk = x[:, iqp] @ V.T
    chi, dchi = problem.sensitivity(pk)
    gk = -qk / mu

    # volume term  int chi u phi_s w'  (moved to the left-hand side with a minus sign)
    vol = (w * chi * uk * gk).sum(axis=1)
    G[:, iu] -= vol[:, None] * dphi[None, :]
    d_u = np.einsum("k,nk,kj->nj", w, chi * gk, V)
    d_p = np.einsum("k,nk,kj->nj", w, dchi * uk * gk, V)
    d_q = np.einsum("k,nk,kj->nj", w, chi * uk, V) * (-1.0 / mu)
    Gx[:, iu[:, None], iu] -= dphi[None, :, None] * d_u[:, None, :]
    Gx[:, iu[:, None], ip] -= dphi[None, :, None] * d_p[:, None, :]
    Gx[:, iu[:, None], iqp] -= dphi[None, :, None] * d_q[:, None, :]

    # endpoint advective flux  n chi(phi_hat) u_hat phi_s
    iyu = np.array([0, 1])
    iyp = np.array([2 * a, 2 * a + 1])
    yu, yp = y[:, iyu], y[:, iyp]
    chie, dchie = problem.sensitivity(yp)
    qe = x[:, iqp]  # nodal P1 flux: endpoint values are the coefficients
    nvec = np.array([-1.0, 1.0])
    adv = nvec * chie * yu * (-qe / mu)
    d_yu = nvec * chie * (-qe / mu)
    d_yp = nvec * dchie * yu * (-qe / mu)
    d_qe = nvec * chie * yu * (-1.0 / mu)
    F[:, iyu] += adv
    G[:, iu] += adv
    Fy[:, iyu, iyu] += d_yu
    Fy[:, iyu, iyp] += d_yp
    Fx[:, iyu, iqp] += d_qe
    Gy[:, iu, iyu] += d_yu
    Gy[:, iu, iyp] += d_yp
    Gx[:, iu, iqp] += d_qe


# ---------------------------------------------------------------------------
# Condensation


@dataclass(frozen=True, eq=False)
class CondensedElement:
    A_tilde: np.ndarray  # (n, nb, nb)
    f_tilde: np.ndarray  # (n, nb)
    Zf: np.ndarray  # A_ii^{-1} f_i
    Zb: np.ndarray  # A_ii^{-1} A_ib


def condense(blocks: LocalBlocks) -> CondensedElement:
    """Per-element Schur complement ``A_bb - A_bi A_ii^{-1} A_ib``."""
    A_ii = np.asarray(blocks.A_ii, dtype=float)
    batched = A_ii.ndim == 3
    A_ib, A_bi, A_bb = (np.asarray(m, dtype=float) for m in (blocks.A_ib, blocks.A_bi, blocks.A_bb))
    f_i, f_b = np.asarray(blocks.f_i, dtype=float), np.asarray(blocks.f_b, dtype=float)
    if not batched:
        A_ii, A_ib, A_bi, A_bb = (np.atleast_2d(m)[None] for m in (A_ii, A_ib, A_bi, A_bb))
        f_i, f_b = np.atleast_1d(f_i)[None], np.atleast_1d(f_b)[None]
    rhs = np.concatenate([A_ib, f_i[..., None]], axis=2)
    try:
        Z = np.linalg.solve(A_ii, rhs)
    except np.linalg.LinAlgError as err:
        raise SingularLocalBlock(str(err)) from err
    if not np.all(np.isfinite(Z)):
        raise SingularLocalBlock("non-finite local solve")
    Zb, Zf = Z[..., :-1], Z[..., -1]
    A_t = A_bb - A_bi @ Zb
    f_t = f_b - np.einsum("nij,nj->ni", A_bi, Zf)
    if not batched:
        return CondensedElement(A_t[0], f_t[0], Zf[0], Zb[0])
    return CondensedElement(A_t, f_t, Zf, Zb)


def recover_bulk(cond: CondensedElement, trace_values: np.ndarray) -> np.ndarray:
    """``A_ii^{-1} (f_i - A_ib y)`` per element."""
    y = np.asarray(trace_values, dtype=float)
    if cond.Zb.ndim == 2:
        return cond.Zf - cond.Zb @ y
    return cond.Zf - np.einsum("nij,nj->ni", cond.Zb, y)


# ---------------------------------------------------------------------------
# Constraints


def _check_condition(conn, cond, eq):
    if cond is None:
        raise MissingCondition((conn.node_tag, eq))
    if conn.kind == "boundary":
        if not isinstance(cond, BOUNDARY_CONDITIONS):
            raise InvalidCondition(f"{type(cond).__name__} not allowed at boundary node {conn.node_tag}")
    else:
        if not isinstance(cond, INTERFACE_CONDITIONS):
            raise InvalidCondition(f"{type(cond).__name__} not allowed at {conn.kind} node {conn.node_tag}")
        if isinstance(cond, KedemKatchalsky) and len(conn.members) != 2:
            raise UnsupportedKKArity(
                f"Kedem-Katchalsky needs exactly 2 arcs, node {conn.node_tag} has {len(conn.members)}"
            )


def validate_conditions(disc: Discretization, conditions: Mapping) -> None:
    for conn in disc.geometry.connections:
        for e in range(disc.n_equations):
            _check_condition(conn, conditions.get((conn.node_tag, e)), e)


def constraint_rows(
    disc: Discretization,
    conditions: Mapping[tuple[str, int], object],
    traces: np.ndarray,
    multipliers: np.ndarray,
    t_next: float,
):
    """Constraint residuals and their (constant) Jacobian entries.

    Returns ``(residual, rows, cols, vals)``; ``rows``/``cols`` are global
    indices (constraint rows start at ``n_trace``).
    """
    nt = disc.n_trace
    res = np.zeros(disc.n_mult)
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []

    def put(r, c, v):
        rows.append(nt + r)
        cols.append(c)
        vals.append(v)

    for ci, conn in enumerate(disc.geometry.connections):
        for e in range(disc.n_equations):
            cond = conditions.get((conn.node_tag, e))
            _check_condition(conn, cond, e)
            ks = [disc.slot_index[(ci, e, mi)] for mi in range(len(conn.members))]
            sl = [disc.slots[k] for k in ks]
            u_hat = [traces[s.trace] for s in sl]
            lam = [multipliers[k] for k in ks]
            if conn.kind == "boundary":
                k, s = ks[0], sl[0]
                g = float(cond.g(conn.members[0].s, t_next))
                if isinstance(cond, Neumann):
                    alpha, beta = 0.0, 1.0
                elif isinstance(cond, Dirichlet):
                    alpha, beta = 1.0, 0.0
                else:
                    alpha, beta = cond.alpha, cond.beta
                res[k] = alpha * u_hat[0] + beta * lam[0] - g
                if alpha:
                    put(k, s.trace, alpha)
                if beta:
                    put(k, nt + k, beta)
            elif isinstance(cond, TraceContinuity):
                res[ks[0]] = sum(lam)
                for k in ks:
                    put(ks[0], nt + k, 1.0)
                for j in range(1, len(ks)):
                    res[ks[j]] = u_hat[0] - u_hat[j]
                    put(ks[j], sl[0].trace, 1.0)
                    put(ks[j], sl[j].trace, -1.0)
            else:
                w = cond.omega
                res[ks[0]] = lam[0] - w * (u_hat[0] - u_hat[1])
                put(ks[0], nt + ks[0], 1.0)
                if w:
                    put(ks[0], sl[0].trace, -w)
                    put(ks[0], sl[1].trace, w)
                res[ks[1]] = lam[0] + lam[1]
                put(ks[1], nt + ks[0], 1.0)
                put(ks[1], nt + ks[1], 1.0)
    return res, np.array(rows, dtype=int), np.array(cols, dtype=int), np.array(vals)


# ---------------------------------------------------------------------------
# Global assembly


@dataclass(frozen=True, eq=False)
class GlobalSystem:
    """Condensed Newton system over traces + multipliers.

    ``residual`` is the condensed residual (flux rows corrected by the local
    residuals, then constraint rows); ``jacobian`` its derivative. The
    Newton correction is ``jacobian @ dU = -residual``.
    """

    residual: np.ndarray
    jacobian: sp.csr_matrix
    condensed: tuple[CondensedElement, ...]
    full_residual_norm: float


def _all_local_blocks(disc, problems, state, prev, dt, t_next, threads=1):
    def work(a):
        y = state.traces[disc.local_trace_index(a)]
        return assemble_local(disc, a, problems[a], state.bulk[a], prev.bulk[a], y, dt, t_next)

    arcs = range(len(disc.meshes))
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, arcs))
    return [work(a) for a in arcs]


def _flux_rows(disc, blocks, multipliers):
    r = np.zeros(disc.n_trace)
    for a, b in enumerate(blocks):
        np.add.at(r, disc.local_trace_index(a), -b.f_b)
    for k, s in enumerate(disc.slots):
        r[s.trace] += multipliers[k]
    return r


def _mult_columns(disc):
    rows = np.array([s.trace for s in disc.slots], dtype=int)
    cols = disc.n_trace + np.arange(disc.n_mult)
    return rows, cols, np.ones(disc.n_mult)


def assemble_global(
    disc: Discretization,
    problems: Sequence[ProblemSpec],
    conditions: Mapping,
    state: SystemState,
    prev: SystemState,
    dt: float,
    t_next: float,
    threads: int = 1,
) -> GlobalSystem:
    blocks = _all_local_blocks(disc, problems, state, prev, dt, t_next, threads)
    condensed = tuple(condense(b) for b in blocks)
    flux = _flux_rows(disc, blocks, state.multipliers)
    cres, crow, ccol, cval = constraint_rows(disc, conditions, state.traces, state.multipliers, t_next)

    res = np.concatenate([flux, cres])
    rows, cols, vals = [crow], [ccol], [cval]
    mr, mc, mv = _mult_columns(disc)
    rows.append(mr)
    cols.append(mc)
    vals.append(mv)
    local_sq = 0.0
    for a, (b, c) in enumerate(zip(blocks, condensed)):
        idx = disc.local_trace_index(a)
        # condensed residual: flux rows minus the local-residual correction
        np.add.at(res, idx, -(c.f_tilde - b.f_b))
        nb = idx.shape[1]
        rows.append(np.repeat(idx, nb, axis=1).ravel())
        cols.append(np.tile(idx, (1, nb)).ravel())
        vals.append(c.A_tilde.ravel())
        local_sq += float(np.sum(b.f_i**2))
    n = disc.n_global
    J = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    full = math.sqrt(local_sq + float(flux @ flux) + float(cres @ cres))
    return GlobalSystem(res, J, condensed, full)


def assemble_monolithic(
    disc: Discretization,
    problems: Sequence[ProblemSpec],
    conditions: Mapping,
    state: SystemState,
    prev: SystemState,
    dt: float,
    t_next: float,
):
    """Uncondensed residual and Jacobian over ``[bulk, traces, multipliers]``."""
    blocks = _all_local_blocks(disc, problems, state, prev, dt, t_next)
    nb = disc.n_bulk
    flux = _flux_rows(disc, blocks, state.multipliers)
    cres, crow, ccol, cval = constraint_rows(disc, conditions, state.traces, state.multipliers, t_next)
    G = np.concatenate([(-b.f_i).ravel() for b in blocks]) if blocks else np.zeros(0)
    res = np.concatenate([G, flux, cres])
    rows, cols, vals = [crow + nb], [ccol + nb], [cval]
    mr, mc, mv = _mult_columns(disc)
    rows.append(mr + nb)
    cols.append(mc + nb)
    vals.append(mv)
    nl = disc.n_local
    for a, b in enumerate(blocks):
        n_el = disc.meshes[a].n_el
        bidx = disc.bulk_offset[a] + np.arange(n_el * nl).reshape(n_el, nl)
        tidx = disc.local_trace_index(a) + nb
        for R, C, M in ((bidx, bidx, b.A_ii), (bidx, tidx, b.A_ib), (tidx, bidx, b.A_bi), (tidx, tidx, b.A_bb)):
            rows.append(np.repeat(R, C.shape[1], axis=1).ravel())
            cols.append(np.tile(C, (1, R.shape[1])).ravel())
            vals.append(M.ravel())
    n = nb + disc.n_global
    J = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    return res, J


def solve_sparse(J: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    try:
        lu = spla.splu(sp.csc_matrix(J))
        x = lu.solve(rhs)
    except RuntimeError as err:
        raise LinearSolveFailure(str(err)) from err
    if not np.all(np.isfinite(x)):
        raise LinearSolveFailure("non-finite solution of the global system")
    return x


# ---------------------------------------------------------------------------
# One backward-Euler step as a Newton system


class StepSystem:
    """Residual / Newton direction provider for one backward-Euler step.

    Iterates are flat vectors ``[bulk, traces, multipliers]``.
    """

    def __init__(self, disc, problems, conditions, prev: SystemState, dt: float, t_next: float, threads: int = 1):
        self.disc = disc
        self.problems = problems
        self.conditions = conditions
        self.prev = prev
        self.dt = dt
        self.t_next = t_next
        self.threads = threads
        self._cache_key: np.ndarray | None = None
        self._cache: GlobalSystem | None = None

    def state(self, U: np.ndarray) -> SystemState:
        return SystemState.from_vector(self.disc, U, self.t_next)

    def system(self, U: np.ndarray) -> GlobalSystem:
        if self._cache_key is not None and np.array_equal(self._cache_key, U):
            return self._cache
        gs = assemble_global(
            self.disc, self.problems, self.conditions, self.state(U), self.prev, self.dt, self.t_next, self.threads
        )
        self._cache_key, self._cache = np.array(U, copy=True), gs
        return gs

    def residual_norm(self, U: np.ndarray) -> float:
        try:
            return self.system(U).full_residual_norm
        except (PoleCrossing, SingularLocalBlock, FloatingPointError):
            return math.inf

    def direction(self, U: np.ndarray) -> np.ndarray:
        disc = self.disc
        gs = self.system(U)
        dg = solve_sparse(gs.jacobian, -gs.residual)
        dtr = dg[: disc.n_trace]
        parts = []
        for a, c in enumerate(gs.condensed):
            parts.append(recover_bulk(c, dtr[disc.local_trace_index(a)]).ravel())
        return np.concatenate(parts + [dg])
