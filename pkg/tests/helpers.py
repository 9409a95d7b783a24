"""Shared fixtures for the solver tests: small networks, random states and an FD Jacobian oracle."""

from __future__ import annotations

import numpy as np

from hdgnet.geometry import build_geometry, parse_lines, parse_points
from hdgnet.hdg import SystemState, assemble_monolithic

KS_CHEMO = dict(nu=1.0, mu=1.0, a=0.5, b=1.0, k1=3.9e-9, k2=5e-6)
OOC_ACTIVE = dict(nu=2.0, epsilon=3.0, sigma=0.5, mu=1.5, a=0.3, b=0.7, c=0.2, d=0.4, k1=0.05, k2=0.5, m1=0.8, m2=1.2)


def two_arc_geometry(length: float = 1.0):
    """Two collinear arcs joined at J1: B0 -> J1 -> B2."""
    pts = parse_points(f"B0,0,0\nJ1,{length},0\nB2,{2 * length},0")
    return build_geometry(pts, parse_lines("B0,J1\nJ1,B2"))


def random_state(disc, rng, u_range, q_scale=1.0, time=0.0, mult_scale=1.0) -> SystemState:
    """Random iterate; ``u_range[e]`` bounds bulk and trace values of equation ``e``."""
    bulk = []
    for mesh in disc.meshes:
        B = np.zeros((mesh.n_el, disc.n_local))
        for e in range(disc.n_equations):
            lo, hi = u_range[e]
            B[:, disc.u_cols(e)] = rng.uniform(lo, hi, (mesh.n_el, 2))
            B[:, disc.q_cols(e)] = q_scale * rng.uniform(-1, 1, (mesh.n_el, len(disc.q_cols(e))))
        bulk.append(B)
    traces = np.zeros(disc.n_trace)
    for a, mesh in enumerate(disc.meshes):
        for e in range(disc.n_equations):
            lo, hi = u_range[e]
            o = disc.trace_offset[a, e]
            traces[o : o + len(mesh.nodes)] = rng.uniform(lo, hi, len(mesh.nodes))
    mults = mult_scale * rng.uniform(-1, 1, disc.n_mult)
    return SystemState(traces, mults, tuple(bulk), time)


def fd_jacobian(disc, problems, conditions, state, prev, dt, t_next):
    """Analytic monolithic Jacobian and its central-difference counterpart."""
    U0 = state.to_vector()

    def res(U):
        st = SystemState.from_vector(disc, U, t_next)
        return assemble_monolithic(disc, problems, conditions, st, prev, dt, t_next)[0]

    _, J = assemble_monolithic(disc, problems, conditions, state, prev, dt, t_next)
    J = J.toarray()
    Jfd = np.zeros_like(J)
    for k in range(len(U0)):
        h = 1e-6 * max(1.0, abs(U0[k]))
        Up, Um = U0.copy(), U0.copy()
        Up[k] += h
        Um[k] -= h
        Jfd[:, k] = (res(Up) - res(Um)) / (2 * h)
    return J, Jfd


def jacobian_mismatch(J, Jfd, rtol: float = 1e-5, floor_frac: float = 1e-5) -> float:
    """Largest ``|J - Jfd| / (rtol * max(|J|, floor))``; at most 1 means agreement.

    Entries smaller than ``floor_frac * max|J|`` sit below the central-difference
    roundoff level and are compared against that floor instead of themselves.
    """
    floor = floor_frac * np.abs(J).max()
    return float(np.max(np.abs(J - Jfd) / (rtol * np.maximum(np.abs(J), floor))))
