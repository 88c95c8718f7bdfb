import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robinshape.geometry import (
    CATALOG,
    Circle,
    GeometryError,
    Kite,
    LShape,
    Polyline,
    Side,
    arc_derivative,
    boundary_from_name,
    curve_frame,
    hausdorff_distance,
    read_polyline,
    resample_polyline,
    sample_boundary,
    write_polyline,
)


def test_kite_point_at_zero():
    np.testing.assert_allclose(Kite()(0.0), [0.855, 0.0], atol=1e-15)


def test_circle_point_at_quarter_turn():
    np.testing.assert_allclose(Circle((0.0, 0.0), 0.3)(np.pi / 2), [0.0, 0.3], atol=1e-15)


def test_lshape_vertices_survive_sampling():
    P = sample_boundary(LShape(), 200)
    expected = [(-0.55, -0.55), (0.55, -0.55), (0.55, 0.0), (0.0, 0.0), (0.0, 0.55), (-0.55, 0.55)]
    corners = {tuple(np.round(P.points[i], 12)) for i in P.corners}
    assert corners == {tuple(v) for v in expected}
    assert len(P.corners) == 6


@pytest.mark.parametrize("name", sorted(CATALOG))
@pytest.mark.parametrize("n", [64, 128, 256, 512])
def test_catalog_shapes_are_simple_ccw_and_inside_unit_disk(name, n):
    P = sample_boundary(CATALOG[name](), n)  # the constructor validates simplicity and orientation
    assert P.area > 0
    assert np.hypot(*P.points.T).max() < 1.0


def test_sample_boundary_rejects_few_points():
    with pytest.raises(GeometryError):
        sample_boundary(Kite(), 7)


def test_unknown_kind_rejected():
    with pytest.raises(GeometryError):
        boundary_from_name("teapot")


def test_polyline_rejects_clockwise_and_self_intersection():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    Polyline(sq)
    with pytest.raises(GeometryError, match="counterclockwise"):
        Polyline(sq[::-1])
    with pytest.raises(GeometryError, match="self-intersects"):
        Polyline([[0, 0], [4, 0], [4, 4], [1, 4], [3, -1]])
    with pytest.raises(GeometryError, match="coincident"):
        Polyline([[0, 0], [1, 0], [1, 0], [1, 1], [0, 1]])


def test_inner_circle_frame():
    P = sample_boundary(Circle((0.0, 0.0), 0.5), 256)
    fr = curve_frame(P, Side.INNER)
    # curvature is the tangential divergence of the annulus normal: -1/r on the inner loop
    np.testing.assert_allclose(fr.curvature, -2.0, atol=1e-3)
    radial = P.points / np.hypot(*P.points.T)[:, None]
    np.testing.assert_allclose(fr.normal, -radial, atol=1e-12)


def test_outer_circle_frame():
    P = sample_boundary(Circle((0.0, 0.0), 1.0), 256)
    fr = curve_frame(P, Side.OUTER)
    np.testing.assert_allclose(fr.normal, P.points, atol=1e-12)
    np.testing.assert_allclose(fr.curvature, 1.0, atol=1e-3)


def test_frame_unit_and_orthogonal(kite):
    fr = curve_frame(kite, Side.INNER)
    np.testing.assert_allclose(np.hypot(*fr.tangent.T), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.hypot(*fr.normal.T), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.einsum("ij,ij->i", fr.tangent, fr.normal), 0.0, atol=1e-12)


def test_curvature_second_order_on_circle():
    errs = []
    for n in (64, 128):
        fr = curve_frame(sample_boundary(Circle((0.0, 0.0), 0.5), n), Side.OUTER)
        errs.append(np.abs(fr.curvature - 2.0).max())
    # exact for equispaced circle samples up to rounding; at worst second order
    assert errs[1] <= max(errs[0] / 3.5, 1e-12)


def test_square_corners_finite_and_flagged():
    sq = Polyline([[0, 0], [0.5, 0], [1, 0], [1, 0.5], [1, 1], [0.5, 1], [0, 1], [0, 0.5]])
    fr = curve_frame(sq, Side.OUTER)
    assert fr.corners == (0, 2, 4, 6)
    # brute force: turning angle pi/2 over mean adjacent length 0.5
    np.testing.assert_allclose(fr.curvature[[0, 2, 4, 6]], (np.pi / 2) / 0.5)
    np.testing.assert_allclose(fr.curvature[[1, 3, 5, 7]], 0.0, atol=1e-12)


def test_degenerate_edge_names_vertex():
    pts = sample_boundary(Circle((0.0, 0.0), 1.0), 16).points.copy()
    pts[5] = pts[4] + 1e-15
    P = Polyline(pts, check=False)
    with pytest.raises(GeometryError, match="vertex 4"):
        curve_frame(P, Side.OUTER)


def test_frame_rotation_equivariance(kite):
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    moved = Polyline(kite.points @ R.T + np.array([0.1, -0.2]))
    a, b = curve_frame(kite, Side.INNER), curve_frame(moved, Side.INNER)
    np.testing.assert_allclose(b.curvature, a.curvature, atol=1e-9)
    np.testing.assert_allclose(b.normal, a.normal @ R.T, atol=1e-12)
    np.testing.assert_allclose(b.tangent, a.tangent @ R.T, atol=1e-12)


def test_arc_derivative_constant_is_zero(kite):
    np.testing.assert_allclose(arc_derivative(np.full(len(kite), 3.0), kite), 0.0, atol=1e-12)


def test_arc_derivative_of_y_on_unit_circle():
    errs = []
    for n in (256, 512):
        P = sample_boundary(Circle((0.0, 0.0), 1.0), n)
        t = np.arctan2(P.points[:, 1], P.points[:, 0])
        errs.append(np.abs(arc_derivative(P.points[:, 1], P) - np.cos(t)).max())
    assert errs[1] < 1e-4 and errs[0] / errs[1] > 3.5


def test_arc_derivative_of_x_squared():
    P = sample_boundary(Circle((0.0, 0.0), 1.0), 512)
    t = np.arctan2(P.points[:, 1], P.points[:, 0])
    np.testing.assert_allclose(arc_derivative(P.points[:, 0] ** 2, P), -2 * np.cos(t) * np.sin(t), atol=1e-4)


def test_second_arc_derivative_converges():
    errs = []
    for n in (128, 256):
        P = sample_boundary(Circle((0.0, 0.0), 1.0), n)
        t = np.arctan2(P.points[:, 1], P.points[:, 0])
        d2 = arc_derivative(arc_derivative(np.sin(2 * t), P), P)
        errs.append(np.abs(d2 + 4 * np.sin(2 * t)).max())
    assert 3.5 < errs[0] / errs[1] < 4.6


def test_arc_derivative_size_mismatch(kite):
    with pytest.raises(ValueError):
        arc_derivative(np.zeros(3), kite)


def test_hausdorff_identical_is_zero(kite):
    assert hausdorff_distance(kite, kite) < 1e-12  # densified points carry rounding only


def test_hausdorff_concentric_circles():
    a = sample_boundary(Circle((0.0, 0.0), 0.3), 512)
    b = sample_boundary(Circle((0.0, 0.0), 0.5), 512)
    assert abs(hausdorff_distance(a, b) - 0.2) < 1e-3


def test_hausdorff_circle_vs_kite_matches_brute_force():
    # all-pairs distances between 20000 parametric samples of each curve
    brute_force = 0.5549999999999999
    a = sample_boundary(Circle((0.0, 0.0), 0.3), 512)
    b = sample_boundary(Kite(), 512)
    assert abs(hausdorff_distance(a, b) - brute_force) < 1e-3


@settings(max_examples=20, deadline=None)
@given(
    r1=st.floats(0.1, 0.9),
    r2=st.floats(0.1, 0.9),
    r3=st.floats(0.1, 0.9),
    cx=st.floats(-0.05, 0.05),
)
def test_hausdorff_metric_properties(r1, r2, r3, cx):
    A = sample_boundary(Circle((cx, 0.0), r1), 64)
    B = sample_boundary(Circle((0.0, 0.0), r2), 64)
    C = sample_boundary(Circle((0.0, cx), r3), 64)
    ab, ba = hausdorff_distance(A, B), hausdorff_distance(B, A)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert ab >= 0
    assert ab <= hausdorff_distance(A, C) + hausdorff_distance(C, B) + 1e-3


def test_resample_keeps_corners():
    P = sample_boundary(LShape(), 100)
    Q = resample_polyline(P, 0.05)
    corners = {tuple(np.round(Q.points[i], 12)) for i in Q.corners}
    assert corners == {tuple(np.round(P.points[i], 12)) for i in P.corners}


def test_polyline_file_round_trip(tmp_path, kite):
    path = tmp_path / "k.txt"
    write_polyline(path, kite)
    assert path.read_text().startswith("# polyline v1\n")
    Q = read_polyline(path)
    np.testing.assert_array_equal(Q.points, kite.points)


def test_polyline_file_malformed_row(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# polyline v1\n0,0\n1,0\nnope\n")
    with pytest.raises(GeometryError, match=":4:"):
        read_polyline(path)
