"""Mass diagnostics, CSV snapshots and SVG rendering."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .elements import reference_matrices
from .geometry import NetworkGeometry
from .hdg import Discretization, SystemState

__all__ = [
    "REGIONS",
    "MassReport",
    "Snapshot",
    "compute_mass",
    "mass_report",
    "snapshot_from_state",
    "snapshot_csv",
    "export_snapshot",
    "read_snapshot",
    "parse_snapshot",
    "diagnostics_csv",
    "colormap",
    "render_birdview",
    "render_geometry",
]

REGIONS = ("all", "left", "right")
SNAPSHOT_HEADER = ("arc_id", "equation", "s", "value", "time")
DIAGNOSTICS_HEADER = ("step", "time", "dt", "newton_iterations", "accepted")


# ---------------------------------------------------------------------------
# Mass


def _element_region_mask(disc: Discretization, arc: int, region: str) -> np.ndarray:
    mesh = disc.meshes[arc]
    if region == "all":
        return np.ones(mesh.n_el, dtype=bool)
    x_min, _, x_max, _ = disc.geometry.bounding_box()
    x_mid = 0.5 * (x_min + x_max)
    mid = 0.5 * (mesh.nodes[:-1] + mesh.nodes[1:])
    x = disc.geometry.arcs[arc].point_at(mid)[:, 0]
    left = x < x_mid
    return left if region == "left" else ~left


def compute_mass(state: SystemState, disc: Discretization, equation: int, region: str = "all") -> float:
    """Integral of the bulk ``u`` of ``equation`` over the elements in ``region``.

    ``left``/``right`` split elements at the x-midline of the bounding box
    by element midpoint.
    """
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}")
    av = reference_matrices(1).Av
    total = 0.0
    for a, mesh in enumerate(disc.meshes):
        mask = _element_region_mask(disc, a, region)
        u = state.u(disc, a, equation)
        total += float(np.sum(mesh.h[mask] * (u[mask] @ av)))
    return total


@dataclass(frozen=True)
class MassReport:
    time: float
    total: tuple[float, ...]
    left: tuple[float, ...]
    right: tuple[float, ...]


def mass_report(state: SystemState, disc: Discretization) -> MassReport:
    n = disc.n_equations
    return MassReport(
        time=state.time,
        total=tuple(compute_mass(state, disc, e) for e in range(n)),
        left=tuple(compute_mass(state, disc, e, "left") for e in range(n)),
        right=tuple(compute_mass(state, disc, e, "right") for e in range(n)),
    )


# ---------------------------------------------------------------------------
# Snapshots


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Sampled fields: ``samples[(arc, eq)] = (s, values)`` sorted by ``s``."""

    time: float
    samples: Mapping[tuple[int, int], tuple[np.ndarray, np.ndarray]]

    @property
    def n_rows(self) -> int:
        return sum(len(s) for s, _ in self.samples.values())


def snapshot_from_state(state: SystemState, disc: Discretization) -> Snapshot:
    """Trace values at mesh nodes interleaved with bulk means at element midpoints."""
    samples = {}
    for a, mesh in enumerate(disc.meshes):
        mid = 0.5 * (mesh.nodes[:-1] + mesh.nodes[1:])
        s = np.empty(2 * mesh.n_el + 1)
        s[0::2], s[1::2] = mesh.nodes, mid
        for e in range(disc.n_equations):
            v = np.empty_like(s)
            v[0::2] = state.arc_traces(disc, a, e)
            v[1::2] = state.u(disc, a, e).mean(axis=1)
            samples[(a, e)] = (s, v)
    return Snapshot(state.time, samples)


def _fmt(x: float) -> str:
    x = float(x)
    if x == 0.0:
        return "0"
    return format(x, ".17g")


def snapshot_csv(snap: Snapshot) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SNAPSHOT_HEADER)
    t = _fmt(snap.time)
    for (a, e) in sorted(snap.samples):
        s, v = snap.samples[(a, e)]
        for si, vi in zip(s, v):
            w.writerow((a, e, _fmt(si), _fmt(vi), t))
    return buf.getvalue()


def export_snapshot(state: SystemState | Snapshot, path, disc: Discretization | None = None) -> None:
    snap = state if isinstance(state, Snapshot) else snapshot_from_state(state, disc)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(snapshot_csv(snap))


def parse_snapshot(text: str) -> Snapshot:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != SNAPSHOT_HEADER:
        raise ValueError(f"snapshot must start with header {','.join(SNAPSHOT_HEADER)}")
    acc: dict[tuple[int, int], list[tuple[float, float]]] = {}
    time = 0.0
    for row in rows[1:]:
        if not row:
            continue
        a, e, s, v, time = int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4])
        acc.setdefault((a, e), []).append((s, v))
    samples = {k: (np.array([p[0] for p in pts]), np.array([p[1] for p in pts])) for k, pts in acc.items()}
    return Snapshot(time, samples)


def read_snapshot(path) -> Snapshot:
    with open(path, encoding="utf-8") as fh:
        return parse_snapshot(fh.read())


def diagnostics_csv(records: Iterable) -> str:
    """``step,time,dt,newton_iterations,accepted`` for each step record."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIAGNOSTICS_HEADER)
    for r in records:
        w.writerow((r.step_number, _fmt(r.time), _fmt(r.dt), r.newton_iterations, int(r.accepted)))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# SVG

# viridis sampled at 9 points
_RAMP = np.array(
    [
        (68, 1, 84),
        (71, 44, 122),
        (59, 81, 139),
        (44, 113, 142),
        (33, 144, 141),
        (39, 173, 129),
        (92, 200, 99),
        (170, 220, 50),
        (253, 231, 37),
    ],
    dtype=float,
)

CANVAS = 640.0
MARGIN = 40.0
BAR_WIDTH = 90.0


def colormap(x: float) -> str:
    """Hex colour for ``x`` in [0, 1] on the fixed ramp (clipped)."""
    x = min(max(float(x), 0.0), 1.0) if math.isfinite(x) else 0.0
    pos = x * (len(_RAMP) - 1)
    i = min(int(pos), len(_RAMP) - 2)
    f = pos - i
    rgb = np.rint((1 - f) * _RAMP[i] + f * _RAMP[i + 1]).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _n(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".") if x != 0 else "0"


class _Frame:
    """Map plane coordinates onto the canvas, preserving aspect ratio, y up."""

    def __init__(self, geometry: NetworkGeometry, extra_right: float = 0.0):
        x0, y0, x1, y1 = geometry.bounding_box()
        span = max(x1 - x0, y1 - y0)
        self.scale = (CANVAS - 2 * MARGIN) / span if span > 0 else 1.0
        self.x0, self.y0 = x0, y0
        self.width = 2 * MARGIN + (x1 - x0) * self.scale + extra_right
        self.height = 2 * MARGIN + (y1 - y0) * self.scale + 30.0

    def __call__(self, p) -> tuple[float, float]:
        x = MARGIN + (p[0] - self.x0) * self.scale
        y = self.height - MARGIN - (p[1] - self.y0) * self.scale
        return x, y


def _svg_open(width: float, height: float) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_n(width)}" height="{_n(height)}" '
        f'viewBox="0 0 {_n(width)} {_n(height)}">',
        f'<rect x="0" y="0" width="{_n(width)}" height="{_n(height)}" fill="white"/>',
    ]


def render_birdview(
    geometry: NetworkGeometry,
    state: SystemState,
    disc: Discretization,
    equation: int,
    time: float | None = None,
    equation_name: str | None = None,
) -> str:
    """Plan view with each element stroked in the colour of its mean value."""
    time = state.time if time is None else time
    name = equation_name or f"equation {equation}"
    means = [state.u(disc, a, equation).mean(axis=1) for a in range(len(disc.meshes))]
    finite = np.concatenate(means) if means else np.zeros(0)
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 0.0
    degenerate = hi - lo < 1e-14
    frame = _Frame(geometry, extra_right=BAR_WIDTH)
    out = _svg_open(frame.width, frame.height)
    out.append(
        f'<text x="{_n(MARGIN)}" y="22" font-family="sans-serif" font-size="16">'
        f"{escape(name)}, t = {format(time, '.6g')}</text>"
    )
    for a, arc in enumerate(geometry.arcs):
        mesh = disc.meshes[a]
        pts = [frame(p) for p in arc.point_at(mesh.nodes)]
        out.append(f'<g id="arc-{a}" class="arc" stroke-width="5" stroke-linecap="round">')
        for k in range(mesh.n_el):
            c = colormap(0.5 if degenerate else (means[a][k] - lo) / (hi - lo))
            (xa, ya), (xb, yb) = pts[k], pts[k + 1]
            out.append(f'<polyline points="{_n(xa)},{_n(ya)} {_n(xb)},{_n(yb)}" stroke="{c}" fill="none"/>')
        out.append("</g>")

    # colour bar
    bx = frame.width - BAR_WIDTH + 20.0
    by, bh = MARGIN + 10.0, frame.height - 2 * MARGIN - 40.0
    n_bins = 1 if degenerate else 64
    out.append('<g id="colourbar">')
    for i in range(n_bins):
        frac = 0.5 if degenerate else i / (n_bins - 1)
        y = by + bh * (1 - (i + 1) / n_bins)
        out.append(
            f'<rect x="{_n(bx)}" y="{_n(y)}" width="16" height="{_n(bh / n_bins + 0.5)}" '
            f'fill="{colormap(frac)}" stroke="none"/>'
        )
    for y, val in ((by, hi), (by + bh, lo)):
        out.append(
            f'<text x="{_n(bx + 22)}" y="{_n(y + 4)}" font-family="sans-serif" font-size="11">'
            f"{format(val, '.4g')}</text>"
        )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_geometry(geometry: NetworkGeometry) -> str:
    """Segments labelled with their index; connection nodes marked by tag letter."""
    if not geometry.arcs:
        return "\n".join(_svg_open(2 * MARGIN, 2 * MARGIN) + ["</svg>"]) + "\n"
    frame = _Frame(geometry)
    out = _svg_open(frame.width, frame.height)
    out.append('<g id="segments" stroke="#333333" stroke-width="2">')
    for arc in geometry.arcs:
        (xa, ya), (xb, yb) = frame(arc.start), frame(arc.end)
        out.append(f'<line x1="{_n(xa)}" y1="{_n(ya)}" x2="{_n(xb)}" y2="{_n(yb)}"/>')
    out.append("</g>")
    out.append('<g id="labels" fill="#1f4fd1" font-family="sans-serif" font-size="12" text-anchor="middle">')
    for arc in geometry.arcs:
        x, y = frame(arc.point_at(arc.x0 + 0.5 * arc.length))
        out.append(f'<text x="{_n(x)}" y="{_n(y - 5)}">{arc.id}</text>')
    out.append("</g>")
    points = {p.tag: (p.x * geometry.length_scale, p.y * geometry.length_scale) for p in geometry.points}
    out.append('<g id="nodes" font-family="sans-serif" font-size="9" text-anchor="middle">')
    for conn in geometry.connections:
        p = points.get(conn.node_tag) or _node_position(geometry, conn)
        x, y = frame(p)
        out.append(f'<circle cx="{_n(x)}" cy="{_n(y)}" r="4" fill="#d62728"/>')
        out.append(f'<text x="{_n(x)}" y="{_n(y + 14)}" fill="#d62728">{escape(conn.node_tag[0])}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _node_position(geometry: NetworkGeometry, conn) -> Sequence[float]:
    m = conn.members[0]
    return tuple(geometry.arcs[m.arc_id].point_at(m.s))


def write_text_atomic(path, text: str) -> None:
    """Write via a temporary sibling file so readers never see partial output."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
