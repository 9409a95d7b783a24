"""Acceptance suite: one PASS/FAIL line per criterion, printed in the pytest summary.

Also runnable directly: ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse.linalg as spla

sys.path.insert(0, __file__.rsplit("/", 1)[0])

from helpers import OOC_ACTIVE, fd_jacobian, jacobian_mismatch, random_state, two_arc_geometry  # noqa: E402
from hdgnet.config import bundled_config, load_config  # noqa: E402
from hdgnet.expressions import evaluate, literal, parse_expression, resolve  # noqa: E402
from hdgnet.geometry import maze_geometry, single_arc, star_geometry  # noqa: E402
from hdgnet.hdg import (  # noqa: E402
    KedemKatchalsky,
    StepSystem,
    SystemState,
    assemble_monolithic,
    build_discretization,
    default_conditions,
    initial_state,
)
from hdgnet.output import compute_mass  # noqa: E402
from hdgnet.problems import build_problem, diffusion_problem  # noqa: E402
from hdgnet.scenarios import setup_simulation, spatial_sweep, temporal_sweep  # noqa: E402
from hdgnet.time_integration import NewtonConfig, TimeStepper, adapt_dt, newton_solve  # noqa: E402

RESULTS: list[str] = []


def report(number: int, ok: bool, detail: str, elapsed: float, budget: float) -> None:
    in_time = elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    line = f"[{status}] criterion {number}: {detail} ({elapsed:.2f} s, budget {budget:g} s)"
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert in_time, line


def _ks_chemo(tau=(1.0, 1.0)):
    return build_problem("ks", dict(nu=1.0, mu=1.0, a=0.5, b=1.0, k1=3.9e-9, k2=5e-6), tau)


# 1 ---------------------------------------------------------------------------


def _monolithic_newton(disc, problems, conds, prev, dt, t_next, tol=1e-12, max_it=25):
    U = prev.to_vector()
    for _ in range(max_it):
        st = SystemState.from_vector(disc, U, t_next)
        res, J = assemble_monolithic(disc, problems, conds, st, prev, dt, t_next)
        if np.linalg.norm(res) < tol:
            break
        U = U + spla.spsolve(J.tocsc(), -res)
    return U


def test_criterion_1_condensation_equivalence():
    t0 = time.perf_counter()
    geo = two_arc_geometry()
    spec = _ks_chemo()
    disc = build_discretization(geo, 0.5, spec.flux_orders)
    assert sum(m.n_el for m in disc.meshes) == 4
    problems = [spec, spec]
    conds = default_conditions(geo, 2)
    prev = initial_state(disc, problems, [resolve("1 + 0.5*cos(pi*s)"), resolve("0.005 + 0.002*s")])
    dt = 0.05
    # single linearised step: condensed direction vs monolithic block solve
    system = StepSystem(disc, problems, conds, prev, dt, dt)
    d_cond = system.direction(prev.to_vector())
    res, J = assemble_monolithic(disc, problems, conds, prev, prev, dt, dt)
    d_mono = spla.spsolve(J.tocsc(), -res)
    diff_lin = float(np.max(np.abs(d_cond - d_mono)))
    # full nonlinear step both ways
    U_cond = newton_solve(system, prev.to_vector(), NewtonConfig(eps_abs=1e-12)).state
    U_mono = _monolithic_newton(disc, problems, conds, prev, dt, dt)
    diff_step = float(np.max(np.abs(U_cond - U_mono)))
    worst = max(diff_lin, diff_step)
    report(1, worst < 1e-10, f"condensed vs monolithic max|diff| = {worst:.2e} (< 1e-10)", time.perf_counter() - t0, 1.0)


# 2 ---------------------------------------------------------------------------


def test_criterion_2_jacobian():
    t0 = time.perf_counter()
    worst = 0.0
    raw = 0.0
    cases = [
        (_ks_chemo(), [(0.5, 1.5), (1e-3, 1e-2)]),
        (build_problem("ooc", OOC_ACTIVE, (1.0,) * 4), [(0.5, 1.5), (0.2, 1.0), (0.5, 2.0), (0.1, 1.0)]),
    ]
    for spec, ranges in cases:
        geo = two_arc_geometry()
        disc = build_discretization(geo, 0.5, spec.flux_orders)
        conds = default_conditions(geo, spec.n_equations)
        for seed in range(3):
            rng = np.random.default_rng(seed)
            state = random_state(disc, rng, ranges, time=0.1)
            prev = random_state(disc, rng, ranges)
            J, Jfd = fd_jacobian(disc, [spec, spec], conds, state, prev, 0.1, 0.1)
            worst = max(worst, jacobian_mismatch(J, Jfd))
            big = np.abs(J) >= 1e-3 * np.abs(J).max()
            raw = max(raw, float(np.max(np.abs(J - Jfd)[big] / np.abs(J)[big])))
    report(
        2,
        worst <= 1.0,
        f"Jacobian vs central FD: scaled mismatch {worst:.3f} (<= 1 at rtol 1e-5, "
        f"floor 1e-5*max|J|); max rel err on entries >= 1e-3*max|J| = {raw:.1e}",
        time.perf_counter() - t0,
        10.0,
    )


# 3 ---------------------------------------------------------------------------


def test_criterion_3_convergence():
    t0 = time.perf_counter()
    space = spatial_sweep(levels=4)
    tm = temporal_sweep(levels=4)
    ok = space.fitted >= 1.9 and 0.9 <= tm.fitted <= 1.1
    report(
        3,
        ok,
        f"spatial L2 order {space.fitted:.3f} (>= 1.9), temporal order {tm.fitted:.3f} (in [0.9, 1.1])",
        time.perf_counter() - t0,
        30.0,
    )


# 4 ---------------------------------------------------------------------------


def test_criterion_4_conservation():
    t0 = time.perf_counter()
    cfg = load_config(bundled_config("maze"))
    zeroed = dict(cfg.physical, a=0.0, b=0.0, c=0.0, d=0.0, m1=0.0)
    cfg = replace(cfg, physical=zeroed)
    sim = setup_simulation(cfg, h_target=30.0)
    m0 = compute_mass(sim.initial, sim.disc, 0)
    drift = 0.0
    split = 0.0
    stepper = sim.stepper()
    n = 0
    for rec in stepper.advance(sim.initial, n_steps=20, dt=cfg.time.dt_init):
        n += rec.accepted
        total = compute_mass(rec.state, sim.disc, 0)
        left = compute_mass(rec.state, sim.disc, 0, "left")
        right = compute_mass(rec.state, sim.disc, 0, "right")
        drift = max(drift, abs(total - m0) / abs(m0))
        split = max(split, abs(left + right - total) / abs(total))
    ok = n == 20 and drift <= 1e-8 and split <= 1e-12
    report(
        4,
        ok,
        f"{n} steps, u-mass drift {drift:.1e} (<= 1e-8), left+right-total {split:.1e} (<= 1e-12)",
        time.perf_counter() - t0,
        60.0,
    )


# 5 ---------------------------------------------------------------------------


def test_criterion_5_controller_table():
    t0 = time.perf_counter()
    table = {1: 1.2, 8: 1.2, 9: 1.0, 14: 1.0, 15: 0.8, 30: 0.8}
    ok = all(adapt_dt(1.0, n, False) == (f, False) for n, f in table.items())
    ok = ok and adapt_dt(1.0, None, True) == (0.5, True)
    report(5, ok, "adapt_dt factors 1.2/1.2/1.0/1.0/0.8/0.8 and failure 0.5 with retry", time.perf_counter() - t0, 1.0)


# 6 ---------------------------------------------------------------------------


def _neighbours(geo, arc):
    out = {arc}
    for c in geo.connections:
        ids = {m.arc_id for m in c.members}
        if arc in ids:
            out |= ids
    return sorted(out)


def _arc_mass(state, disc, a, e):
    return float(np.sum(disc.meshes[a].h * state.u(disc, a, e).mean(axis=1)))


def test_criterion_6_maze_sanity():
    t0 = time.perf_counter()
    cfg = load_config(bundled_config("maze"))
    sim = setup_simulation(cfg, h_target=30.0)
    geo, disc = sim.geometry, sim.disc
    near = _neighbours(geo, 17)
    v0 = compute_mass(sim.initial, disc, 2)
    stepper = sim.stepper()
    # the longer horizon keeps all 10 steps short of the end time
    recs = list(stepper.advance(sim.initial, dt=cfg.time.dt_init, T_final=3600.0, adaptive=True, max_steps=10))
    final = stepper.state
    kept = sum(_arc_mass(final, disc, a, 2) for a in near) / v0
    v_drift = abs(compute_mass(final, disc, 2) - v0) / v0
    spread = [a for a in range(geo.n_arcs) if a != 28 and _arc_mass(final, disc, a, 0) > 0]
    accepted = sum(r.accepted for r in recs)
    ok = accepted == 10 and kept >= 0.999 and v_drift <= 1e-6 and len(spread) >= 3
    report(
        6,
        ok,
        f"{accepted} adaptive steps to t={final.time:g}; v kept on arcs {near}: {100 * kept:.6f}% (>= 99.9%), "
        f"v drift {v_drift:.1e} (<= 1e-6), u positive on {len(spread)} other arcs (>= 3)",
        time.perf_counter() - t0,
        120.0,
    )


# 7 ---------------------------------------------------------------------------


def _run(disc, problems, conds, init, n=5, dt=0.05):
    stepper = TimeStepper(disc, problems, conds, NewtonConfig(eps_abs=1e-12))
    for _ in stepper.advance(init, n_steps=n, dt=dt):
        pass
    return stepper.state


def test_criterion_7_junctions():
    t0 = time.perf_counter()
    spec = _ks_chemo()
    geo = star_geometry(3, 1.0)
    disc = build_discretization(geo, 0.2, spec.flux_orders)
    init = initial_state(
        disc,
        [spec] * 3,
        [
            [resolve("1 + 0.5*cos(pi*s)"), literal(0.005)],
            [literal(1.0), literal(0.002)],
            [resolve("1 - 0.3*s"), resolve("0.001 + 0.004*s")],
        ],
    )
    st = _run(disc, [spec] * 3, default_conditions(geo, 2), init)
    conn = next(i for i, c in enumerate(geo.connections) if c.node_tag == "J0")
    trace_gap = 0.0
    mult_sum = 0.0
    for e in range(2):
        centre = [st.arc_traces(disc, a, e)[0] for a in range(3)]
        trace_gap = max(trace_gap, max(centre) - min(centre))
        mult_sum = max(mult_sum, abs(sum(st.multipliers[disc.slot_index[(conn, e, m)]] for m in range(3))))

    heat = diffusion_problem(1.0, 1.0, 1)
    geo2 = two_arc_geometry()
    disc2 = build_discretization(geo2, 0.25, heat.flux_orders)
    fields = [resolve("1 + s"), resolve("3 - s^2")]
    kk = default_conditions(geo2, 1, {("J1", 0): KedemKatchalsky(0.0)})
    coupled = _run(disc2, [heat] * 2, kk, initial_state(disc2, [heat] * 2, [[fields[0]], [fields[1]]]))
    kk_gap = 0.0
    for a in range(2):
        g1 = single_arc(1.0)
        d1 = build_discretization(g1, 0.25, heat.flux_orders)
        alone = _run(d1, [heat], default_conditions(g1, 1), initial_state(d1, [heat], [fields[a]]))
        kk_gap = max(kk_gap, float(np.max(np.abs(coupled.u(disc2, a, 0) - alone.u(d1, 0, 0)))))
    ok = trace_gap <= 1e-10 and mult_sum <= 1e-10 and kk_gap <= 1e-9
    report(
        7,
        ok,
        f"star trace spread {trace_gap:.1e}, multiplier sum {mult_sum:.1e} (<= 1e-10); "
        f"KK omega=0 vs independent arcs {kk_gap:.1e} (<= 1e-9)",
        time.perf_counter() - t0,
        10.0,
    )


# 8 ---------------------------------------------------------------------------


def test_criterion_8_parser_corpus():
    t0 = time.perf_counter()
    s = np.linspace(0.0, 1.0, 11)
    e1 = evaluate(parse_expression("2.5 + 0.0*s"), s, 0.0)
    e2 = evaluate(parse_expression("sin(2*pi*s)"), s, 0.0)
    ok_expr = np.allclose(e1, 2.5, rtol=0, atol=0) and np.allclose(e2, np.sin(2 * np.pi * s), rtol=0, atol=1e-15)
    geo = maze_geometry(50.0)
    lengths = [a.length for a in geo.arcs]
    ok_geo = geo.n_arcs == 29 and min(lengths) >= 50.0 and max(lengths) <= 300.0
    report(
        8,
        bool(ok_expr and ok_geo),
        f"quoted expressions evaluate as specified; maze has {geo.n_arcs} arcs, lengths in "
        f"[{min(lengths):g}, {max(lengths):g}]",
        time.perf_counter() - t0,
        1.0,
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
