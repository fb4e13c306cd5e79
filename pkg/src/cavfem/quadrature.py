"""Symmetric quadrature rules on the reference triangle.

Weights sum to the reference area 1/2.  The degree-8 rule (16 points) is
stored as orbit parameters and polished to machine precision against the
exact monomial moments the first time it is requested.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math
from math import factorial, sqrt

import numpy as np
from scipy.optimize import least_squares


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)
    degree: int

    def __len__(self) -> int:
        return len(self.weights)


def monomial_integral(i: int, j: int) -> float:
    """Exact integral of xh1**i * xh2**j over the reference triangle."""
    return factorial(i) * factorial(j) / factorial(i + j + 2)


def _expand(orbits):
    """Barycentric orbits -> (points, weights); weights are area-normalised."""
    pts, wts = [], []
    for kind, w, *ab in orbits:
        if kind == "s3":
            bary = [(1 / 3, 1 / 3, 1 / 3)]
        elif kind == "s21":
            a = ab[0]
            b = 1.0 - 2.0 * a
            bary = [(a, a, b), (a, b, a), (b, a, a)]
        else:
            a, b = ab
            c = 1.0 - a - b
            bary = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
        for l1, l2, l3 in bary:
            pts.append((l2, l3))
            wts.append(w)
    return np.array(pts), 0.5 * np.array(wts)


def _moment_residual(points, weights, degree):
    res = []
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            val = np.sum(weights * points[:, 0] ** i * points[:, 1] ** j)
            res.append((val - monomial_integral(i, j)) / monomial_integral(i, j))
    return np.array(res)


def _degree5():
    s = sqrt(15.0)
    a1, a2 = (6.0 - s) / 21.0, (6.0 + s) / 21.0
    w1, w2 = (155.0 - s) / 1200.0, (155.0 + s) / 1200.0
    return [("s3", 9.0 / 40.0), ("s21", w1, a1), ("s21", w2, a2)]


# Dunavant (1985) degree-8 rule, 16 points; polished below.
_DUNAVANT8 = [
    ("s3", 0.144315607677787),
    ("s21", 0.095091634267285, 0.459292588292723),
    ("s21", 0.103217370534718, 0.170569307751760),
    ("s21", 0.032458497623198, 0.050547228317031),
    ("s111", 0.027230314174435, 0.008394777409958, 0.263112829634638),
]


def _pack(orbits):
    return np.array([v for o in orbits for v in o[1:]])


def _unpack(x, template):
    out, k = [], 0
    for o in template:
        n = len(o) - 1
        out.append((o[0], *x[k : k + n]))
        k += n
    return out


@lru_cache(maxsize=None)
def triangle_rule(degree: int = 5) -> QuadratureRule:
    """Return the degree-5 (7 pt) or degree-8 (16 pt) symmetric rule."""
    if degree == 5:
        pts, wts = _expand(_degree5())
        return QuadratureRule(pts, wts, 5)
    if degree == 8:
        x0 = _pack(_DUNAVANT8)

        def fun(x):
            return _moment_residual(*_expand(_unpack(x, _DUNAVANT8)), 8)

        sol = least_squares(fun, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        pts, wts = _expand(_unpack(sol.x, _DUNAVANT8))
        return QuadratureRule(pts, wts, 8)
    raise ValueError(f"no triangle rule of degree {degree} (available: 5, 8)")


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _collapse(kind: str, ell: np.ndarray, s: np.ndarray):
    """Reference points and Jacobians for coordinates (ell, s) on the unit square.

    ``ell`` is the radial coordinate of the representative element (0 on the
    inner circle, 1 on the outer one): ``y`` for A, ``1 - y`` for B,
    ``xh1`` for C and ``xh2`` for D.
    """
    if kind == "A":
        return np.stack([ell * (1 - s), ell * s], axis=-1), ell
    if kind == "B":
        t = 1.0 - ell
        return np.stack([t * (1 - s), t * s], axis=-1), t
    if kind == "C":
        return np.stack([ell, (1 - ell) * s], axis=-1), 1.0 - ell
    if kind == "D":
        return np.stack([(1 - ell) * s, ell], axis=-1), 1.0 - ell
    raise ValueError(f"unknown element kind {kind!r}")


@lru_cache(maxsize=None)
def graded_rule(kind: str, ratio: float, n: int = 5, growth: float = 2.0) -> QuadratureRule:
    """Collapsed Gauss rule graded toward the inner circle of a ring.

    For a ring with thickness/inner-radius ``ratio = tau/eps`` the radius is
    roughly ``eps (1 + ratio ell)``; the ``ell`` range is cut where that
    factor grows by ``growth``, and each piece gets ``n`` Gauss points
    (``n`` more across).  Integrands like ``R^{-p}`` near a small cavity are
    then resolved uniformly in ``eps``.  Exact for polynomials of degree
    ``2n - 2`` on the reference triangle.
    """
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    pieces = max(1, math.ceil(math.log1p(ratio) / math.log(growth) - 1e-12))
    if ratio > 0:
        cuts = np.expm1(np.linspace(0.0, math.log1p(ratio), pieces + 1)) / ratio
    else:
        cuts = np.linspace(0.0, 1.0, pieces + 1)
    cuts[0], cuts[-1] = 0.0, 1.0
    x, w = gauss_legendre(n)
    a, b = cuts[:-1, None], cuts[1:, None]
    ell = (a + (b - a) * x[None, :]).ravel()
    well = ((b - a) * w[None, :]).ravel()
    L, S = np.meshgrid(ell, x, indexing="ij")
    WL, WS = np.meshgrid(well, w, indexing="ij")
    pts, jac = _collapse(kind, L.ravel(), S.ravel())
    return QuadratureRule(pts, (WL * WS).ravel() * jac, 2 * n - 2)
