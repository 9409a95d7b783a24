import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdgnet.expressions import literal, resolve
from hdgnet.geometry import build_geometry, maze_geometry, single_arc
from hdgnet.hdg import SystemState, build_discretization, initial_state
from hdgnet.output import (
    SNAPSHOT_HEADER,
    colormap,
    compute_mass,
    diagnostics_csv,
    export_snapshot,
    mass_report,
    parse_snapshot,
    read_snapshot,
    render_birdview,
    render_geometry,
    snapshot_csv,
    snapshot_from_state,
)
from hdgnet.problems import build_problem, diffusion_problem
from hdgnet.time_integration import StepRecord

SVG = "{http://www.w3.org/2000/svg}"


def _arc_state(length, h, f):
    geo = single_arc(length)
    spec = diffusion_problem(1.0, 1.0, 1)
    disc = build_discretization(geo, h, spec.flux_orders)
    return disc, initial_state(disc, [spec], [f])


def _maze_state(fields=None):
    geo = maze_geometry()
    spec = build_problem("ooc", dict(nu=1, epsilon=1, sigma=1, mu=1), (0.5,) * 4)
    disc = build_discretization(geo, 40.0, spec.flux_orders)
    fields = fields or [resolve("1 + 0.01*s"), literal(0.0), resolve("exp(-s/50)"), literal(0.0)]
    return geo, disc, initial_state(disc, [spec] * geo.n_arcs, fields)


def test_mass_of_constant():
    disc, state = _arc_state(2.0, 0.5, literal(1.0))
    assert compute_mass(state, disc, 0) == pytest.approx(2.0, rel=1e-15)


def test_mass_of_linear_is_exact():
    disc, state = _arc_state(1.0, 0.25, resolve("s"))
    assert compute_mass(state, disc, 0) == pytest.approx(0.5, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_mass_is_linear(a, b):
    disc, s1 = _arc_state(3.0, 0.4, resolve("sin(s)"))
    _, s2 = _arc_state(3.0, 0.4, resolve("s^2"))
    combo = SystemState.from_vector(disc, a * s1.to_vector() + b * s2.to_vector(), 0.0)
    expected = a * compute_mass(s1, disc, 0) + b * compute_mass(s2, disc, 0)
    assert compute_mass(combo, disc, 0) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_left_plus_right_is_total():
    _, disc, state = _maze_state()
    for e in range(4):
        total = compute_mass(state, disc, e)
        assert compute_mass(state, disc, e, "left") + compute_mass(state, disc, e, "right") == pytest.approx(
            total, rel=1e-12, abs=1e-12
        )
    rep = mass_report(state, disc)
    assert rep.total[1] == 0.0 and rep.left[0] > 0 and rep.right[0] > 0


def test_bad_region():
    disc, state = _arc_state(1.0, 0.5, literal(1.0))
    with pytest.raises(ValueError):
        compute_mass(state, disc, 0, "middle")


def test_snapshot_of_zero_state():
    disc, state = _arc_state(1.0, 0.25, literal(0.0))
    text = snapshot_csv(snapshot_from_state(state, disc))
    lines = text.splitlines()
    assert lines[0] == ",".join(SNAPSHOT_HEADER) == "arc_id,equation,s,value,time"
    assert len(lines) == 1 + 9
    assert all(line.split(",")[3] == "0" for line in lines[1:])


def test_snapshot_round_trip(tmp_path):
    _, disc, state = _maze_state()
    snap = snapshot_from_state(state, disc)
    path = tmp_path / "snap.csv"
    export_snapshot(state, path, disc)
    back = read_snapshot(path)
    assert back.time == snap.time and set(back.samples) == set(snap.samples)
    for k, (s, v) in snap.samples.items():
        np.testing.assert_array_equal(back.samples[k][0], s)
        np.testing.assert_array_equal(back.samples[k][1], v)
    assert snapshot_csv(back) == path.read_text()
    expected_rows = sum(4 * (2 * m.n_el + 1) for m in disc.meshes)
    assert back.n_rows == expected_rows


def test_snapshot_rejects_bad_header():
    with pytest.raises(ValueError):
        parse_snapshot("a,b,c\n1,2,3\n")


def test_diagnostics_csv():
    recs = [StepRecord(1, 0.5, 0.5, 3, True), StepRecord(2, 0.5, 0.6, 25, False)]
    assert diagnostics_csv(recs).splitlines() == ["step,time,dt,newton_iterations,accepted", "1,0.5,0.5,3,1", "2,0.5,0.59999999999999998,25,0"]


def test_colormap_ends():
    assert colormap(0.0) == "#440154"
    assert colormap(1.0) == "#fde725"
    assert colormap(-3) == colormap(0.0) and colormap(7) == colormap(1.0)


def test_birdview_is_wellformed_and_complete():
    geo, disc, state = _maze_state()
    svg = render_birdview(geo, state, disc, 2, equation_name="v")
    root = ET.fromstring(svg)
    arcs = [g for g in root.iter(SVG + "g") if g.get("class") == "arc"]
    assert [g.get("id") for g in arcs] == [f"arc-{a}" for a in range(29)]
    for g, mesh in zip(arcs, disc.meshes):
        assert len(list(g)) == mesh.n_el
    assert render_birdview(geo, state, disc, 2, equation_name="v") == svg


def test_birdview_degenerate_range():
    geo, disc, state = _maze_state([literal(3.0)] * 4)
    root = ET.fromstring(render_birdview(geo, state, disc, 0))
    colours = {p.get("stroke") for p in root.iter(SVG + "polyline")}
    assert colours == {colormap(0.5)}


def test_render_geometry_labels():
    geo = maze_geometry()
    root = ET.fromstring(render_geometry(geo))
    labels = [t.text for g in root.iter(SVG + "g") if g.get("id") == "labels" for t in g]
    assert labels == [str(i) for i in range(29)]
    nodes = [g for g in root.iter(SVG + "g") if g.get("id") == "nodes"][0]
    assert len(nodes.findall(SVG + "circle")) == len(geo.connections)


def test_render_empty_geometry():
    geo = build_geometry([], [], 1.0)
    root = ET.fromstring(render_geometry(geo))
    assert root.tag == SVG + "svg" and len(list(root.iter(SVG + "line"))) == 0
