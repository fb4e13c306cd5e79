"""Reference element, quadratic geometric map and polar helpers.

Node ordering on the reference triangle is fixed throughout the package::

    0: (0, 0)      vertex a1, barycentric lambda1 = 1 - xh1 - xh2
    1: (1, 0)      vertex a2, lambda2 = xh1
    2: (0, 1)      vertex a3, lambda3 = xh2
    3: (1/2, 0)    edge node a12
    4: (0, 1/2)    edge node a13
    5: (1/2, 1/2)  edge node a23

Functions accept a single point of shape ``(2,)`` or a stack of points of
shape ``(..., 2)`` and broadcast accordingly.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

REF_TOL = 1e-12

REF_NODES = np.array(
    [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]]
)

# local (vertex, vertex) pairs carrying each edge node
EDGE_VERTICES = ((0, 1), (0, 2), (1, 2))


class RefPoint(NamedTuple):
    xh1: float
    xh2: float

    @property
    def y(self) -> float:
        return self.xh1 + self.xh2

    @property
    def z(self) -> float:
        return self.xh1 * self.xh2


class Point2(NamedTuple):
    x1: float
    x2: float


class PolarPoint(NamedTuple):
    R: float
    theta: float


class DegenerateMapError(ValueError):
    """Raised when a geometric map has (numerically) vanishing Jacobian."""


def _as_ref(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 2:
        raise ValueError(f"reference points need a trailing axis of size 2, got {p.shape}")
    x1, x2 = p[..., 0], p[..., 1]
    outside = (x1 < -REF_TOL) | (x2 < -REF_TOL) | (x1 + x2 > 1.0 + REF_TOL)
    if np.any(outside):
        raise ValueError("reference point outside the reference triangle")
    return p


def shape_values(p) -> np.ndarray:
    """Quadratic Lagrange basis on the reference triangle, shape ``(..., 6)``."""
    p = _as_ref(p)
    l2, l3 = p[..., 0], p[..., 1]
    l1 = 1.0 - l2 - l3
    return np.stack(
        [
            l1 * (2.0 * l1 - 1.0),
            l2 * (2.0 * l2 - 1.0),
            l3 * (2.0 * l3 - 1.0),
            4.0 * l1 * l2,
            4.0 * l1 * l3,
            4.0 * l2 * l3,
        ],
        axis=-1,
    )


def shape_gradients(p) -> np.ndarray:
    """Reference gradients of the six basis functions, shape ``(..., 6, 2)``."""
    p = _as_ref(p)
    l2, l3 = p[..., 0], p[..., 1]
    l1 = 1.0 - l2 - l3
    zero = np.zeros_like(l1)
    d1 = np.stack(
        [
            1.0 - 4.0 * l1,
            4.0 * l2 - 1.0,
            zero,
            4.0 * (l1 - l2),
            -4.0 * l3,
            4.0 * l3,
        ],
        axis=-1,
    )
    d2 = np.stack(
        [
            1.0 - 4.0 * l1,
            zero,
            4.0 * l3 - 1.0,
            -4.0 * l2,
            4.0 * (l1 - l3),
            4.0 * l2,
        ],
        axis=-1,
    )
    return np.stack([d1, d2], axis=-1)


def map_eval(coeffs, p) -> np.ndarray:
    """Evaluate F_T at reference point(s); ``coeffs`` is the ``(6, 2)`` node array."""
    return shape_values(p) @ np.asarray(coeffs, dtype=float)


def map_jacobian(coeffs, p, check: bool = True):
    """Jacobian ``J[k, l] = d x_k / d xh_l`` of F_T and its determinant.

    Raises :class:`DegenerateMapError` when ``|det J|`` falls below
    ``1e-14 * scale**2`` (scale = diameter of the node set), unless
    ``check`` is false.
    """
    X = np.asarray(coeffs, dtype=float)
    dphi = shape_gradients(p)
    J = np.einsum("ak,...al->...kl", X, dphi)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if check:
        scale = float(np.max(np.ptp(X, axis=0)))
        if np.any(np.abs(det) < 1e-14 * scale**2):
            raise DegenerateMapError("degenerate quadratic map (|det J| ~ 0)")
    return J, det


def to_polar(x, center=(0.0, 0.0)) -> np.ndarray:
    """Cartesian -> (R, theta) with theta in (-pi, pi]."""
    d = np.asarray(x, dtype=float) - np.asarray(center, dtype=float)
    R = np.hypot(d[..., 0], d[..., 1])
    theta = np.arctan2(d[..., 1], d[..., 0])
    theta = np.where(theta == -np.pi, np.pi, theta)
    return np.stack([R, theta], axis=-1)


def to_cartesian(polar, center=(0.0, 0.0)) -> np.ndarray:
    polar = np.asarray(polar, dtype=float)
    R, theta = polar[..., 0], polar[..., 1]
    out = np.stack([R * np.cos(theta), R * np.sin(theta)], axis=-1)
    return out + np.asarray(center, dtype=float)


def mid_arc_polar(r1: float, t1: float, r2: float, t2: float) -> tuple[float, float]:
    """Mid-arc rule in polar form: mean radius and mean angle."""
    return 0.5 * (r1 + r2), 0.5 * (t1 + t2)


def mid_arc_node(ai, aj, center=(0.0, 0.0)) -> Point2:
    """Edge node of a curved edge: mean radius and mean angle about ``center``.

    The mean angle is taken along the short arc, so the two points must be
    separated by strictly less than pi as seen from ``center``.
    """
    (ri, ti), (rj, tj) = to_polar(np.array([ai, aj], dtype=float), center)
    if ri == 0.0 or rj == 0.0:
        raise ValueError("edge endpoint coincides with the centre")
    dt = math.remainder(tj - ti, 2.0 * math.pi)
    if abs(dt) >= math.pi:
        raise ValueError("angular separation >= pi: mid-arc branch is ambiguous")
    r, t = mid_arc_polar(ri, ti, rj, ti + dt)
    cx, cy = center
    return Point2(r * math.cos(t) + cx, r * math.sin(t) + cy)
