"""Network geometry: point/line CSV parsing and connection classification.

``points.csv`` rows are ``tag,x,y`` and ``lines.csv`` rows are
``start_tag,end_tag``. Lines starting with ``#`` are comments; a leading
header row is recognised and skipped. The first letter of a tag fixes the
node kind: ``J`` junction, ``T`` T-junction, ``B`` boundary.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "DuplicateTag",
    "BadTagPrefix",
    "MalformedRow",
    "UnknownTag",
    "TPointNotOnAnyArc",
    "ZeroLengthArc",
    "InvalidConnection",
    "TaggedPoint",
    "Arc",
    "Attachment",
    "Connection",
    "NetworkGeometry",
    "parse_points",
    "parse_lines",
    "build_geometry",
    "geometry_to_csv",
    "load_geometry",
    "maze_geometry",
    "single_arc",
    "star_geometry",
    "describe",
]

NODE_KINDS = {"J": "junction", "T": "tjunction", "B": "boundary"}


class GeometryError(ValueError):
    pass


class DuplicateTag(GeometryError):
    def __init__(self, tag: str):
        super().__init__(f"duplicate point tag {tag!r}")
        self.tag = tag


class BadTagPrefix(GeometryError):
    def __init__(self, tag: str):
        super().__init__(f"point tag {tag!r} must start with J, T or B")
        self.tag = tag


class MalformedRow(GeometryError):
    def __init__(self, line_no: int, detail: str = ""):
        super().__init__(f"malformed row at line {line_no}" + (f": {detail}" if detail else ""))
        self.line_no = line_no


class UnknownTag(GeometryError):
    def __init__(self, tag: str):
        super().__init__(f"line references unknown point tag {tag!r}")
        self.tag = tag


class TPointNotOnAnyArc(GeometryError):
    def __init__(self, tag: str, detail: str = "does not lie strictly inside any arc"):
        super().__init__(f"T-point {tag!r} {detail}")
        self.tag = tag


class ZeroLengthArc(GeometryError):
    def __init__(self, arc_id: int):
        super().__init__(f"arc {arc_id} has zero length")
        self.arc_id = arc_id


class InvalidConnection(GeometryError):
    pass


@dataclass(frozen=True)
class TaggedPoint:
    tag: str
    x: float
    y: float

    @property
    def kind(self) -> str:
        return NODE_KINDS[self.tag[0]]


@dataclass(frozen=True)
class Arc:
    id: int
    start_tag: str
    end_tag: str
    length: float
    start: tuple[float, float]
    end: tuple[float, float]
    x0: float = 0.0

    def point_at(self, s) -> np.ndarray:
        """Planar coordinates of local coordinate(s) ``s`` in ``[x0, x0+length]``."""
        frac = (np.asarray(s, dtype=float) - self.x0) / self.length
        p0, p1 = np.asarray(self.start), np.asarray(self.end)
        return p0 + frac[..., None] * (p1 - p0)


@dataclass(frozen=True)
class Attachment:
    arc_id: int
    where: str  # 'start' | 'end' | 'interior'
    s: float  # local coordinate of the attachment point

    @property
    def is_endpoint(self) -> bool:
        return self.where != "interior"


@dataclass(frozen=True)
class Connection:
    node_tag: str
    kind: str  # 'junction' | 'tjunction' | 'boundary'
    members: tuple[Attachment, ...]


@dataclass(frozen=True)
class NetworkGeometry:
    arcs: tuple[Arc, ...]
    connections: tuple[Connection, ...]
    length_scale: float = 1.0
    points: tuple[TaggedPoint, ...] = field(default=(), compare=True)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    def connection(self, tag: str) -> Connection:
        for conn in self.connections:
            if conn.node_tag == tag:
                return conn
        raise KeyError(tag)

    def bounding_box(self) -> tuple[float, float, float, float]:
        if not self.arcs:
            return (0.0, 0.0, 0.0, 0.0)
        xy = np.array([p for a in self.arcs for p in (a.start, a.end)])
        return (xy[:, 0].min(), xy[:, 1].min(), xy[:, 0].max(), xy[:, 1].max())

    def with_x0(self, offsets: dict[int, float]) -> "NetworkGeometry":
        """Shift local coordinate origins of the given arcs."""
        arcs = list(self.arcs)
        for i, x0 in offsets.items():
            arcs[i] = replace(arcs[i], x0=float(x0))
        conns = []
        for conn in self.connections:
            members = []
            for m in conn.members:
                old = self.arcs[m.arc_id]
                new = arcs[m.arc_id]
                members.append(replace(m, s=m.s - old.x0 + new.x0))
            conns.append(replace(conn, members=tuple(members)))
        return replace(self, arcs=tuple(arcs), connections=tuple(conns))


# ---------------------------------------------------------------------------
# CSV parsing


def _rows(csv_text: str):
    reader = csv.reader(io.StringIO(csv_text))
    for line_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if row[0].lstrip().startswith("#"):
            continue
        yield line_no, [c.strip() for c in row]


def _normalize_tag(tag: str) -> str:
    return tag[:1].upper() + tag[1:]


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def parse_points(csv_text: str) -> list[TaggedPoint]:
    points: list[TaggedPoint] = []
    seen: set[str] = set()
    first = True
    for line_no, row in _rows(csv_text):
        if first and len(row) == 3 and not _is_number(row[1]):
            first = False
            continue
        first = False
        if len(row) != 3 or not row[0]:
            raise MalformedRow(line_no, "expected tag,x,y")
        tag = _normalize_tag(row[0])
        if tag[0] not in NODE_KINDS:
            raise BadTagPrefix(tag)
        try:
            x, y = float(row[1]), float(row[2])
        except ValueError:
            raise MalformedRow(line_no, "non-numeric coordinate") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise MalformedRow(line_no, "non-finite coordinate")
        if tag in seen:
            raise DuplicateTag(tag)
        seen.add(tag)
        points.append(TaggedPoint(tag, x, y))
    return points


def parse_lines(csv_text: str) -> list[tuple[str, str]]:
    lines: list[tuple[str, str]] = []
    first = True
    for line_no, row in _rows(csv_text):
        if first and len(row) == 2 and row[0][:1].upper() not in NODE_KINDS:
            first = False
            continue
        first = False
        if len(row) != 2 or not row[0] or not row[1]:
            raise MalformedRow(line_no, "expected start_tag,end_tag")
        lines.append((_normalize_tag(row[0]), _normalize_tag(row[1])))
    return lines


# ---------------------------------------------------------------------------
# Network construction


def _project(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Return (fraction along a->b, distance) of the projection of p."""
    d = b - a
    frac = float(np.dot(p - a, d) / np.dot(d, d))
    foot = a + frac * d
    return frac, float(np.hypot(*(p - foot)))


def build_geometry(
    points: Sequence[TaggedPoint],
    lines: Sequence[tuple[str, str]],
    length_scale: float = 1.0,
) -> NetworkGeometry:
    if not length_scale > 0:
        raise GeometryError("length_scale must be positive")
    by_tag = {p.tag: p for p in points}
    if len(by_tag) != len(points):
        for i, p in enumerate(points):
            if any(q.tag == p.tag for q in points[:i]):
                raise DuplicateTag(p.tag)

    arcs: list[Arc] = []
    for i, (t0, t1) in enumerate(lines):
        for t in (t0, t1):
            if t not in by_tag:
                raise UnknownTag(t)
        p0, p1 = by_tag[t0], by_tag[t1]
        start = (p0.x * length_scale, p0.y * length_scale)
        end = (p1.x * length_scale, p1.y * length_scale)
        length = math.hypot(end[0] - start[0], end[1] - start[1])
        if length == 0.0:
            raise ZeroLengthArc(i)
        arcs.append(Arc(i, t0, t1, length, start, end))

    attached: dict[str, list[Attachment]] = {p.tag: [] for p in points}
    for arc in arcs:
        attached[arc.start_tag].append(Attachment(arc.id, "start", arc.x0))
        attached[arc.end_tag].append(Attachment(arc.id, "end", arc.x0 + arc.length))

    tol = 1e-9 * length_scale
    connections: list[Connection] = []
    for p in points:
        members = attached[p.tag]
        kind = p.kind
        if not members:
            warnings.warn(f"point {p.tag} is not used by any line", stacklevel=2)
            continue
        if kind == "boundary":
            if len(members) != 1:
                raise InvalidConnection(
                    f"boundary point {p.tag} must end exactly one arc, found {len(members)}"
                )
        elif kind == "junction":
            if len(members) < 2:
                raise InvalidConnection(f"junction point {p.tag} must join at least two arcs")
        else:
            if len(members) != 1:
                raise InvalidConnection(
                    f"T-point {p.tag} must be the endpoint of exactly one arc, found {len(members)}"
                )
            own = members[0].arc_id
            xy = np.array([p.x, p.y]) * length_scale
            hits = []
            for arc in arcs:
                if arc.id == own:
                    continue
                frac, dist = _project(xy, np.asarray(arc.start), np.asarray(arc.end))
                if dist <= tol and tol / arc.length < frac < 1.0 - tol / arc.length:
                    hits.append(Attachment(arc.id, "interior", arc.x0 + frac * arc.length))
            if not hits:
                raise TPointNotOnAnyArc(p.tag)
            if len(hits) > 1:
                raise TPointNotOnAnyArc(p.tag, "touches more than one arc")
            members = members + hits
        connections.append(Connection(p.tag, kind, tuple(members)))

    geom = NetworkGeometry(tuple(arcs), tuple(connections), float(length_scale), tuple(points))
    if arcs and not _is_connected(geom):
        warnings.warn("network graph is not connected", stacklevel=2)
    return geom


def _is_connected(geom: NetworkGeometry) -> bool:
    parent = list(range(geom.n_arcs))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for conn in geom.connections:
        ids = [m.arc_id for m in conn.members]
        for other in ids[1:]:
            parent[find(other)] = find(ids[0])
    return len({find(i) for i in range(geom.n_arcs)}) == 1


def geometry_to_csv(geom: NetworkGeometry) -> tuple[str, str]:
    """Serialise back to ``(points_csv, lines_csv)`` in unscaled coordinates."""
    pts = io.StringIO()
    pts.write("tag,x,y\n")
    for p in geom.points:
        pts.write(f"{p.tag},{p.x!r},{p.y!r}\n")
    lns = io.StringIO()
    lns.write("start_tag,end_tag\n")
    for arc in geom.arcs:
        lns.write(f"{arc.start_tag},{arc.end_tag}\n")
    return pts.getvalue(), lns.getvalue()


def load_geometry(points_path, lines_path, length_scale: float = 1.0) -> NetworkGeometry:
    with open(points_path, encoding="utf-8") as fh:
        points = parse_points(fh.read())
    with open(lines_path, encoding="utf-8") as fh:
        lines = parse_lines(fh.read())
    return build_geometry(points, lines, length_scale)


def maze_geometry(length_scale: float = 50.0) -> NetworkGeometry:
    """The bundled 29-segment maze layout."""
    data = resources.files("hdgnet") / "data"
    points = parse_points((data / "maze_points.csv").read_text(encoding="utf-8"))
    lines = parse_lines((data / "maze_lines.csv").read_text(encoding="utf-8"))
    return build_geometry(points, lines, length_scale)


def single_arc(length: float = 1.0) -> NetworkGeometry:
    return build_geometry([TaggedPoint("B0", 0.0, 0.0), TaggedPoint("B1", length, 0.0)], [("B0", "B1")])


def star_geometry(n_arms: int = 3, length: float = 1.0) -> NetworkGeometry:
    """``n_arms`` arcs radiating from junction ``J0``; arcs run centre -> tip."""
    pts = [TaggedPoint("J0", 0.0, 0.0)]
    lines = []
    for k in range(n_arms):
        ang = 2.0 * math.pi * k / n_arms
        pts.append(TaggedPoint(f"B{k + 1}", length * math.cos(ang), length * math.sin(ang)))
        lines.append(("J0", f"B{k + 1}"))
    return build_geometry(pts, lines)


def describe(geom: NetworkGeometry) -> str:
    out = [f"{geom.n_arcs} arcs, {len(geom.connections)} connections, length scale {geom.length_scale:g}", ""]
    out.append(f"{'arc':>4}  {'start':<6} {'end':<6} {'length':>12} {'x0':>8}")
    for a in geom.arcs:
        out.append(f"{a.id:>4}  {a.start_tag:<6} {a.end_tag:<6} {a.length:>12.6g} {a.x0:>8.6g}")
    out.append("")
    out.append(f"{'node':<6} {'kind':<10} members")
    for c in geom.connections:
        members = ", ".join(
            f"{m.arc_id}:{m.where}" + (f"@{m.s:.6g}" if m.where == "interior" else "") for m in c.members
        )
        out.append(f"{c.node_tag:<6} {c.kind:<10} {members}")
    return "\n".join(out) + "\n"


def iter_endpoint_attachments(geom: NetworkGeometry) -> Iterable[Attachment]:
    for conn in geom.connections:
        for m in conn.members:
            if m.is_endpoint:
                yield m
