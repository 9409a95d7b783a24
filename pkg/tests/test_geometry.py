import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdgnet.geometry import (
    BadTagPrefix,
    DuplicateTag,
    MalformedRow,
    TaggedPoint,
    TPointNotOnAnyArc,
    UnknownTag,
    ZeroLengthArc,
    build_geometry,
    describe,
    geometry_to_csv,
    iter_endpoint_attachments,
    maze_geometry,
    parse_lines,
    parse_points,
    single_arc,
    star_geometry,
)


def test_parse_minimal_points():
    pts = parse_points("B1,0.0,0.0\nJ2,1.0,0.0")
    assert [(p.tag, p.x, p.y) for p in pts] == [("B1", 0.0, 0.0), ("J2", 1.0, 0.0)]


def test_parse_points_header_comments_and_case():
    pts = parse_points("tag,x,y\n# a comment\n\nj1, 1, 2\nt2,3,4\n")
    assert [p.tag for p in pts] == ["J1", "T2"]
    assert pts[1].kind == "tjunction"


def test_bad_prefix():
    with pytest.raises(BadTagPrefix):
        parse_points("X3,0,0")


def test_duplicate_tag():
    with pytest.raises(DuplicateTag) as info:
        parse_points("B1,0,0\nB1,1,0")
    assert "B1" in str(info.value)


@pytest.mark.parametrize("text,line", [("B1,0\n", 1), ("B1,0,0\nB2,a,0\n", 2), ("B1,0,0,0", 1)])
def test_malformed_point_rows(text, line):
    with pytest.raises(MalformedRow) as info:
        parse_points(text)
    assert info.value.line_no == line


def test_parse_lines():
    assert parse_lines("B1,J2") == [("B1", "J2")]
    assert parse_lines("") == []
    with pytest.raises(MalformedRow):
        parse_lines("B1")


def test_unit_segment_scaled():
    g = build_geometry(parse_points("B1,0,0\nB2,1,0"), parse_lines("B1,B2"), 50.0)
    assert len(g.arcs) == 1 and g.arcs[0].length == 50.0
    assert [c.kind for c in g.connections] == ["boundary", "boundary"]


def test_shared_junction():
    g = build_geometry(parse_points("B1,0,0\nJ2,1,0\nB3,2,0"), parse_lines("B1,J2\nJ2,B3"), 1.0)
    j = g.connection("J2")
    assert j.kind == "junction" and len(j.members) == 2
    assert {m.where for m in j.members} == {"start", "end"}


def test_tjunction_projection():
    pts = parse_points("B1,0,0\nB2,4,0\nT1,1,0\nB3,1,2")
    g = build_geometry(pts, parse_lines("B1,B2\nT1,B3"), 10.0)
    t = g.connection("T1")
    assert t.kind == "tjunction"
    interior = [m for m in t.members if m.where == "interior"]
    assert len(interior) == 1 and interior[0].arc_id == 0
    assert interior[0].s == pytest.approx(10.0)


def test_tpoint_off_arc():
    pts = parse_points("B1,0,0\nB2,4,0\nT1,1,0.5\nB3,1,2")
    with pytest.raises(TPointNotOnAnyArc):
        build_geometry(pts, parse_lines("B1,B2\nT1,B3"), 1.0)


def test_unknown_tag_and_zero_length():
    pts = parse_points("B1,0,0\nB2,0,0")
    with pytest.raises(UnknownTag):
        build_geometry(pts, [("B1", "B9")], 1.0)
    with pytest.raises(ZeroLengthArc):
        build_geometry(pts, [("B1", "B2")], 1.0)


def test_disconnected_warns():
    pts = parse_points("B1,0,0\nB2,1,0\nB3,5,5\nB4,6,5")
    with pytest.warns(UserWarning):
        build_geometry(pts, [("B1", "B2"), ("B3", "B4")], 1.0)


def test_maze_corpus():
    g = maze_geometry(50.0)
    assert g.n_arcs == 29
    lengths = np.array([a.length for a in g.arcs])
    assert lengths.min() >= 50.0 and lengths.max() <= 300.0
    kinds = {c.kind for c in g.connections}
    assert kinds == {"junction", "tjunction", "boundary"}


def test_every_endpoint_in_exactly_one_connection():
    for g in (maze_geometry(), star_geometry(5), single_arc(2.0)):
        ends = [(m.arc_id, m.where) for m in iter_endpoint_attachments(g)]
        assert len(ends) == 2 * g.n_arcs
        assert len(set(ends)) == len(ends)


def test_csv_round_trip_is_identical():
    g = maze_geometry(50.0)
    p, l = geometry_to_csv(g)
    again = build_geometry(parse_points(p), parse_lines(l), 50.0)
    assert again == g


def test_describe_lists_arcs():
    text = describe(star_geometry(3, 2.0))
    assert "3 arcs" in text and "J0" in text


@st.composite
def chains(draw):
    n = draw(st.integers(1, 6))
    xs = draw(st.lists(st.floats(-50, 50), min_size=n + 1, max_size=n + 1))
    ys = draw(st.lists(st.floats(-50, 50), min_size=n + 1, max_size=n + 1))
    pts = list(zip(xs, ys))
    for a, b in zip(pts, pts[1:]):
        if math.dist(a, b) < 1e-3:
            return None
    tags = ["B0"] + [f"J{i}" for i in range(1, n)] + [f"B{n}"]
    return [TaggedPoint(t, x, y) for t, (x, y) in zip(tags, pts)], list(zip(tags, tags[1:]))


@settings(max_examples=100, deadline=None)
@given(chains(), st.floats(0.01, 1000))
def test_lengths_scale_exactly(chain, scale):
    if chain is None:
        return
    pts, lines = chain
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = build_geometry(pts, lines, scale)
    by_tag = {p.tag: p for p in pts}
    for arc in g.arcs:
        a, b = by_tag[arc.start_tag], by_tag[arc.end_tag]
        expected = scale * math.hypot(b.x - a.x, b.y - a.y)
        assert arc.length == pytest.approx(expected, rel=1e-12)
    assert sum(m.is_endpoint for c in g.connections for m in c.members) == 2 * g.n_arcs
    p_csv, l_csv = geometry_to_csv(g)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert build_geometry(parse_points(p_csv), parse_lines(l_csv), scale) == g
