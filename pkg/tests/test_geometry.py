import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavfem.fem import template_nodes
from cavfem.geometry import (
    REF_NODES,
    DegenerateMapError,
    map_eval,
    map_jacobian,
    mid_arc_node,
    shape_gradients,
    shape_values,
    to_cartesian,
    to_polar,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def ref_points(draw):
    a, b = draw(unit), draw(unit)
    if a + b > 1.0:
        a, b = 1.0 - a, 1.0 - b
    return np.array([a, b])


def straight(a1, a2, a3):
    a1, a2, a3 = map(np.asarray, (a1, a2, a3))
    return np.array([a1, a2, a3, (a1 + a2) / 2, (a1 + a3) / 2, (a2 + a3) / 2], dtype=float)


def test_lagrange_delta_property():
    assert np.allclose(shape_values(REF_NODES), np.eye(6), atol=1e-14, rtol=0)


def test_vertex_values():
    assert np.array_equal(shape_values([1.0, 0.0]), [0, 1, 0, 0, 0, 0])
    assert np.array_equal(shape_values([0.0, 0.0]), [1, 0, 0, 0, 0, 0])
    assert math.isclose(shape_values([0.25, 0.25]).sum(), 1.0, abs_tol=1e-15)


def test_outside_reference_triangle_rejected():
    with pytest.raises(ValueError):
        shape_values([0.7, 0.4])
    with pytest.raises(ValueError):
        shape_gradients([-1e-9, 0.5])
    shape_values([0.5 + 5e-13, 0.5])  # within the membership tolerance


@given(ref_points())
def test_partition_of_unity(p):
    assert abs(shape_values(p).sum() - 1.0) <= 1e-14
    assert np.abs(shape_gradients(p).sum(axis=0)).max() <= 1e-13


@given(ref_points())
@settings(max_examples=50)
def test_gradients_match_central_differences(p):
    p = 0.9 * p + 0.03  # keep the stencil inside the triangle
    h = 1e-6
    fd = np.stack(
        [(shape_values(p + h * e) - shape_values(p - h * e)) / (2 * h) for e in np.eye(2)],
        axis=-1,
    )
    assert np.abs(fd - shape_gradients(p)).max() <= 1e-8


def test_identity_map():
    X = straight((0, 0), (1, 0), (0, 1))
    pts = np.random.default_rng(0).dirichlet(np.ones(3), 25)[:, 1:]
    assert np.allclose(map_eval(X, pts), pts, atol=1e-15)
    J, det = map_jacobian(X, pts)
    assert np.allclose(J, np.eye(2), atol=1e-14)
    assert np.allclose(det, 1.0, atol=1e-14)


@given(
    st.lists(st.floats(-3, 3, allow_nan=False), min_size=6, max_size=6),
    ref_points(),
)
def test_straight_triangle_map_is_affine(c, p):
    a1, a2, a3 = np.array(c).reshape(3, 2)
    A = np.stack([a2 - a1, a3 - a1], axis=1)
    if abs(np.linalg.det(A)) < 1e-3:
        return
    X = straight(a1, a2, a3)
    J, det = map_jacobian(X, p)
    assert np.allclose(J, A, atol=1e-13)
    assert np.allclose(map_eval(X, p), a1 + A @ p, atol=1e-13)


def test_map_reproduces_nodes():
    X = template_nodes("A", 64, 0.01, 0.015, 0.02)
    assert np.allclose(map_eval(X, REF_NODES), X, rtol=0, atol=1e-17)


def test_type_a_positive_jacobian():
    X = template_nodes("A", 64, 0.01, 0.015, 0.02)
    pts = np.random.default_rng(1).dirichlet(np.ones(3), 100)[:, 1:]
    _, det = map_jacobian(X, pts)
    assert np.all(det > 0)


def test_jacobian_matches_finite_differences(rng):
    X = template_nodes("B", 16, 0.3, 0.35, 0.4) + 0.01 * rng.standard_normal((6, 2))
    pts = 0.9 * rng.dirichlet(np.ones(3), 20)[:, 1:] + 0.03
    J, _ = map_jacobian(X, pts)
    h = 1e-6
    for p, Jp in zip(pts, J):
        fd = np.stack([(map_eval(X, p + h * e) - map_eval(X, p - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
        assert np.abs(fd - Jp).max() <= 1e-7 * np.abs(Jp).max()


def test_degenerate_map_signalled():
    X = straight((0, 0), (1, 0), (2, 0))
    with pytest.raises(DegenerateMapError):
        map_jacobian(X, [0.2, 0.2])


@given(st.floats(1e-6, 10.0), st.floats(-math.pi, math.pi, exclude_min=True))
def test_polar_round_trip(R, t):
    x = to_cartesian([R, t])
    back = to_polar(x)
    assert abs(back[0] - R) <= 1e-14 * R
    assert np.allclose(to_cartesian(back), x, rtol=1e-14, atol=1e-14 * R)


def test_polar_branch():
    assert to_polar([-1.0, 0.0])[1] == math.pi
    assert to_polar([-1.0, -0.0])[1] == math.pi


def test_mid_arc_examples():
    assert np.allclose(mid_arc_node((1, 0), (0, 1)), (math.cos(math.pi / 4), math.sin(math.pi / 4)), atol=1e-15)
    assert np.allclose(mid_arc_node((0.01, 0), (0.02, 0)), (0.015, 0.0), atol=1e-17)
    aj = (0.01 * math.cos(2 * math.pi / 64), 0.01 * math.sin(2 * math.pi / 64))
    R, t = to_polar(np.array(mid_arc_node((0.01, 0.0), aj)))
    assert math.isclose(R, 0.01, rel_tol=1e-14) and math.isclose(t, math.pi / 64, rel_tol=1e-13)


def test_mid_arc_short_arc_across_branch_cut():
    a = to_cartesian([1.0, math.pi - 0.1])
    b = to_cartesian([1.0, -math.pi + 0.1])
    R, t = to_polar(np.array(mid_arc_node(a, b)))
    assert math.isclose(abs(t), math.pi, abs_tol=1e-14)


def test_mid_arc_rejects_ambiguous_branch():
    with pytest.raises(ValueError):
        mid_arc_node((1, 0), (-1, 0))
    with pytest.raises(ValueError):
        mid_arc_node((0, 0), (1, 0))
