"""Command-line entry point.

Exit codes: 0 success, 1 configuration/geometry/input error (nothing is
written), 2 solver abort, 3 convergence check failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Sequence

from . import config as cfg
from .expressions import UnresolvableFunction
from .geometry import GeometryError, build_geometry, describe, load_geometry, parse_lines, parse_points
from .hdg import InvalidCondition, LinearSolveFailure, MissingCondition, UnsupportedKKArity, validate_conditions
from .output import (
    diagnostics_csv,
    mass_report,
    render_birdview,
    render_geometry,
    snapshot_csv,
    snapshot_from_state,
    write_text_atomic,
)
from .problems import UnknownModel
from .scenarios import setup_simulation, spatial_sweep, temporal_sweep
from .time_integration import DtUnderflow, NewtonFailure

log = logging.getLogger("hdgnet")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_ORDER = 0, 1, 2, 3
INPUT_ERRORS = (
    OSError,
    cfg.ConfigError,
    GeometryError,
    UnknownModel,
    UnresolvableFunction,
    MissingCondition,
    InvalidCondition,
    UnsupportedKKArity,
    KeyError,
    ValueError,
)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_INPUT


def _error_text(err: BaseException) -> str:
    if isinstance(err, KeyError) and err.args:
        return str(err.args[0])
    return str(err) or type(err).__name__


# ---------------------------------------------------------------------------
# run


def _load_run_inputs(args):
    config = cfg.load_config_file(args.config, args.model)
    geometry = None
    if args.points or args.lines:
        if not (args.points and args.lines):
            raise cfg.ConfigError("--points/--lines", "both files must be given")
        scale = args.length_scale if args.length_scale is not None else config.geometry.length_scale
        geometry = load_geometry(args.points, args.lines, scale)
        offsets = {i: d.x0 for i, d in config.domains.items() if d.x0 is not None}
        if offsets:
            geometry = geometry.with_x0(offsets)
    elif args.length_scale is not None:
        from dataclasses import replace

        config = replace(config, geometry=replace(config.geometry, length_scale=args.length_scale))
    sim = setup_simulation(config, geometry, args.h)
    validate_conditions(sim.disc, sim.conditions)
    return sim


def _prepare_out(path: str, force: bool) -> str | None:
    if os.path.exists(path):
        if not os.path.isdir(path):
            return f"--out {path!r} exists and is not a directory"
        if os.listdir(path) and not force:
            return f"output directory {path!r} is not empty (use --force to overwrite)"
    return None


def cmd_run(args) -> int:
    try:
        sim = _load_run_inputs(args)
    except INPUT_ERRORS as err:
        return _fail(_error_text(err))
    problem = _prepare_out(args.out, args.force)
    if problem:
        return _fail(problem)
    if args.snapshot_every is not None and args.snapshot_every < 1:
        return _fail("--snapshot-every must be >= 1")

    tconf = sim.config.time
    adaptive = args.adaptive or (tconf.adaptive and args.steps is None)
    T_final = args.t_final if args.t_final is not None else tconf.T_final
    stepper = sim.stepper(args.threads)
    if adaptive:
        steps = stepper.advance(
            sim.initial,
            dt=tconf.dt_init,
            T_final=T_final,
            adaptive=True,
            dt_min=tconf.dt_min,
            dt_max=tconf.dt_max,
            max_steps=args.steps,
        )
    else:
        n_steps = args.steps if args.steps is not None else max(1, round(T_final / tconf.dt_init))
        steps = stepper.advance(sim.initial, n_steps=n_steps, dt=tconf.dt_init)

    os.makedirs(args.out, exist_ok=True)
    eqs = sim.config.equations
    records = []
    masses = [mass_report(sim.initial, sim.disc)]
    files: dict[str, str] = {}
    if args.snapshot_every:
        files["snapshot_00000.csv"] = snapshot_csv(snapshot_from_state(sim.initial, sim.disc))
    status = EXIT_OK
    try:
        for rec in steps:
            records.append(rec)
            if not args.quiet:
                mark = "" if rec.accepted else "  (rejected)"
                print(f"step {rec.step_number:5d}  t={rec.time:.6g}  dt={rec.dt:.4g}  newton={rec.newton_iterations}{mark}")
            if rec.accepted:
                masses.append(mass_report(rec.state, sim.disc))
                if args.snapshot_every and rec.step_number % args.snapshot_every == 0:
                    files[f"snapshot_{rec.step_number:05d}.csv"] = snapshot_csv(snapshot_from_state(rec.state, sim.disc))
    except (NewtonFailure, DtUnderflow, LinearSolveFailure) as err:
        print(f"solver aborted: {err}", file=sys.stderr)
        status = EXIT_SOLVER

    final = stepper.state
    files["snapshot_final.csv"] = snapshot_csv(snapshot_from_state(final, sim.disc))
    files["diagnostics.csv"] = diagnostics_csv(records)
    files["mass.csv"] = _mass_csv(masses, eqs)
    if args.render:
        for e, name in enumerate(eqs):
            files[f"birdview_{name}.svg"] = render_birdview(sim.geometry, final, sim.disc, e, equation_name=name)
    for name, text in files.items():
        write_text_atomic(os.path.join(args.out, name), text)
    accepted = sum(r.accepted for r in records)
    print(f"{accepted} accepted steps, t = {final.time:.6g}; outputs in {args.out}")
    return status


def _mass_csv(reports, eqs) -> str:
    head = ["time"] + [f"{e}_{part}" for e in eqs for part in ("total", "left", "right")]
    lines = [",".join(head)]
    for r in reports:
        row = [format(r.time, ".17g")]
        for k in range(len(eqs)):
            row += [format(x, ".17g") for x in (r.total[k], r.left[k], r.right[k])]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# convergence


def cmd_convergence(args) -> int:
    kwargs = dict(levels=args.levels, tau=args.tau, flux_order=args.flux_order, tau_scaling=args.tau_scaling)
    if args.mode == "space":
        res = spatial_sweep(**kwargs)
        label, ok = "h", res.fitted >= 1.9
        target = "order >= 1.9"
    else:
        res = temporal_sweep(**kwargs)
        label, ok = "dt", 0.9 <= res.fitted <= 1.1
        target = "order in [0.9, 1.1]"
    print(f"{label:>12}  {'L2 error':>14}  {'order':>7}")
    for i, (h, err) in enumerate(zip(res.sizes, res.errors)):
        order = f"{res.orders[i - 1]:7.3f}" if i else f"{'':>7}"
        print(f"{h:12.6g}  {err:14.6e}  {order}")
    print(f"fitted order {res.fitted:.3f} ({target}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ORDER


# ---------------------------------------------------------------------------
# geometry / config helpers


def _read_geometry(args):
    with open(args.points, encoding="utf-8") as fh:
        points = parse_points(fh.read())
    with open(args.lines, encoding="utf-8") as fh:
        lines = parse_lines(fh.read())
    return build_geometry(points, lines, args.length_scale)


def cmd_plot_geometry(args) -> int:
    try:
        geom = _read_geometry(args)
    except INPUT_ERRORS as err:
        return _fail(_error_text(err))
    if os.path.exists(args.output) and not args.force:
        return _fail(f"{args.output!r} exists (use --force to overwrite)")
    write_text_atomic(args.output, render_geometry(geom))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_geometry_describe(args) -> int:
    try:
        geom = _read_geometry(args)
    except INPUT_ERRORS as err:
        return _fail(_error_text(err))
    sys.stdout.write(describe(geom))
    return EXIT_OK


def cmd_validate_config(args) -> int:
    try:
        config = cfg.load_config_file(args.config, args.model)
        if config.geometry.builder or config.geometry.points:
            sim = setup_simulation(config)
            validate_conditions(sim.disc, sim.conditions)
    except INPUT_ERRORS as err:
        return _fail(_error_text(err))
    print(f"{args.config}: ok ({config.model}, {config.n_equations} equations)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdgnet", description="HDG solver for reaction-diffusion-chemotaxis networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a simulation")
    r.add_argument("--model", choices=("ks", "ooc"))
    r.add_argument("--config", required=True)
    r.add_argument("--points")
    r.add_argument("--lines")
    r.add_argument("--length-scale", type=float)
    r.add_argument("--h", type=float, help="override the target mesh size")
    when = r.add_mutually_exclusive_group()
    when.add_argument("--steps", type=int, help="number of accepted steps (cap in adaptive mode)")
    when.add_argument("--t-final", type=float)
    r.add_argument("--adaptive", action="store_true")
    r.add_argument("--out", default="out")
    r.add_argument("--snapshot-every", type=int)
    r.add_argument("--render", action="store_true")
    r.add_argument("--force", action="store_true")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("convergence", help="heat-equation refinement study")
    c.add_argument("--mode", choices=("space", "time"), default="space")
    c.add_argument("--levels", type=int, default=4)
    c.add_argument("--tau", type=float, default=1.0)
    c.add_argument("--flux-order", type=int, choices=(0, 1), default=1)
    c.add_argument("--tau-scaling", choices=("diffusive", "absolute"), default="diffusive")
    c.set_defaults(func=cmd_convergence)

    g = sub.add_parser("plot-geometry", help="render a geometry diagram to SVG")
    _geometry_args(g)
    g.add_argument("--output", "-o", default="geometry.svg")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_plot_geometry)

    v = sub.add_parser("validate-config", help="check a configuration file")
    v.add_argument("--config", required=True)
    v.add_argument("--model", choices=("ks", "ooc"))
    v.set_defaults(func=cmd_validate_config)

    geo = sub.add_parser("geometry", help="geometry utilities")
    geo_sub = geo.add_subparsers(dest="geometry_command", required=True)
    d = geo_sub.add_parser("describe", help="print arcs and connections")
    _geometry_args(d)
    d.set_defaults(func=cmd_geometry_describe)
    return p


def _geometry_args(p):
    p.add_argument("--points", required=True)
    p.add_argument("--lines", required=True)
    p.add_argument("--length-scale", type=float, default=1.0)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "convergence" and args.levels < 2:
        parser.error("convergence needs --levels >= 2 to estimate an order")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
