"""Quadratic iso-parametric FE functions on an annulus mesh.

An :class:`FEFunction` stores the deformed position of every mesh node.
Everything is parameterised by (element, reference point); the inverse map
``F_T^{-1}`` is never formed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cavfem.geometry import (
    REF_NODES,
    DegenerateMapError,
    shape_gradients,
    shape_values,
)
from cavfem.meshgen import AnnulusMesh
from cavfem.quadrature import QuadratureRule, graded_rule


@dataclass(frozen=True, eq=False)
class FEFunction:
    mesh: AnnulusMesh
    values: np.ndarray  # (n_nodes, 2)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.mesh.n_nodes, 2):
            raise ValueError(f"expected values of shape {(self.mesh.n_nodes, 2)}, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def element_values(self) -> np.ndarray:
        return self.values[self.mesh.conn]


def radial_field(s):
    """Map ``x -> s(|x|) x / |x|`` for a scalar radial profile ``s``."""

    def v(x):
        x = np.asarray(x, dtype=float)
        R = np.hypot(x[..., 0], x[..., 1])
        return (s(R) / R)[..., None] * x

    return v


def interpolate(mesh: AnnulusMesh, v) -> FEFunction:
    """Nodal interpolant of ``v`` (callable on ``(n, 2)`` arrays, or nodal array)."""
    vals = v(mesh.nodes) if callable(v) else np.asarray(v, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("interpolated field is not finite at every node")
    return FEFunction(mesh, vals)


class GeometryCache:
    """Per-element geometric data at quadrature points.

    ``points`` is ``(nq, 2)`` (shared by all elements) or ``(ne, nq, 2)``
    (one row per element); ``elements`` optionally restricts the cache to a
    subset of the mesh elements.
    """

    def __init__(self, mesh: AnnulusMesh, points: np.ndarray, weights=None, elements=None):
        self.mesh = mesh
        self.elements = np.arange(mesh.n_elements) if elements is None else np.asarray(elements, dtype=np.int64)
        self.conn = mesh.conn[self.elements]
        ne = len(self.elements)
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 2:
            pts = np.broadcast_to(pts, (ne,) + pts.shape)
        self.points = pts
        self.weights = None
        if weights is not None:
            w = np.asarray(weights, dtype=float)
            self.weights = np.broadcast_to(w, (ne,) + w.shape[-1:]) if w.ndim == 1 else w
        self.phi = shape_values(pts)  # (ne, nq, 6)
        self.dphi = shape_gradients(pts)  # (ne, nq, 6, 2)
        X = mesh.nodes[self.conn]
        self.x = np.einsum("eqa,eak->eqk", self.phi, X)
        self.J = np.einsum("eak,eqal->eqkl", X, self.dphi)
        self.detJ = self.J[..., 0, 0] * self.J[..., 1, 1] - self.J[..., 0, 1] * self.J[..., 1, 0]
        bad = np.flatnonzero(np.any(self.detJ <= 0.0, axis=1))
        if len(bad):
            raise DegenerateMapError(
                f"non-positive geometric Jacobian on elements {self.elements[bad[:10]].tolist()}"
            )
        inv = np.empty_like(self.J)
        inv[..., 0, 0] = self.J[..., 1, 1]
        inv[..., 1, 1] = self.J[..., 0, 0]
        inv[..., 0, 1] = -self.J[..., 0, 1]
        inv[..., 1, 0] = -self.J[..., 1, 0]
        self.Jinv = inv / self.detJ[..., None, None]
        # physical gradients of the basis: grad phi_a = dphi_a^T J^{-1}
        self.grad_phi = np.einsum("eqal,eqlk->eqak", self.dphi, self.Jinv)

    @classmethod
    def for_rule(cls, mesh: AnnulusMesh, rule: QuadratureRule, elements=None) -> "GeometryCache":
        return cls(mesh, rule.points, rule.weights, elements)

    @property
    def dx(self) -> np.ndarray:
        """Quadrature measure ``w_q det J``, shape ``(ne, nq)``."""
        return self.weights * self.detJ

    def values(self, U: np.ndarray) -> np.ndarray:
        """``U`` nodal (n_nodes, 2) -> field values (ne, nq, 2)."""
        return np.einsum("eqa,eak->eqk", self.phi, U[self.conn])

    def gradients(self, U: np.ndarray) -> np.ndarray:
        """``U`` nodal (n_nodes, 2) -> deformation gradients (ne, nq, 2, 2)."""
        return np.einsum("eak,eqal->eqkl", U[self.conn], self.grad_phi)


class MeshQuadrature:
    """Element quadrature for a whole mesh, as groups of :class:`GeometryCache`.

    With ``rule`` every element uses that rule.  Otherwise each element gets
    :func:`~cavfem.quadrature.graded_rule` for its kind and its ring's
    ``tau/eps``, so that rings that are thick relative to their inner radius
    are integrated accurately; elements with equal point counts share a group.
    """

    def __init__(self, mesh: AnnulusMesh, rule: QuadratureRule | None = None, n: int = 5):
        self.mesh = mesh
        self.groups: list[GeometryCache] = []
        if mesh.n_elements == 0:
            return
        if rule is not None:
            self.groups.append(GeometryCache.for_rule(mesh, rule))
            return
        ratio = mesh.elem_tau / mesh.elem_eps
        rules = [graded_rule(str(k), float(r), n) for k, r in zip(mesh.kinds, ratio)]
        sizes = np.array([len(r) for r in rules])
        for size in np.unique(sizes):
            idx = np.flatnonzero(sizes == size)
            pts = np.stack([rules[e].points for e in idx])
            wts = np.stack([rules[e].weights for e in idx])
            self.groups.append(GeometryCache(mesh, pts, wts, idx))

    def __iter__(self):
        return iter(self.groups)

    def n_points(self) -> int:
        return int(sum(g.weights.size for g in self.groups))


def det2(F: np.ndarray) -> np.ndarray:
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def _element_coords(f: FEFunction, elem) -> tuple[int, np.ndarray, np.ndarray]:
    e = elem if isinstance(elem, (int, np.integer)) else elem.index
    conn = f.mesh.conn[e]
    return int(e), f.mesh.nodes[conn], f.values[conn]


def eval(f: FEFunction, elem, p) -> np.ndarray:  # noqa: A001 - mirrors FE vocabulary
    """Value of ``f`` at reference point(s) ``p`` of element ``elem``."""
    _, _, U = _element_coords(f, elem)
    return shape_values(p) @ U


def eval_gradient(f: FEFunction, elem, p) -> np.ndarray:
    """Physical gradient ``(df/dxh) (dx/dxh)^{-1}`` at reference point(s) ``p``."""
    e, X, U = _element_coords(f, elem)
    dphi = shape_gradients(p)
    J = np.einsum("ak,...al->...kl", X, dphi)
    G = np.einsum("ak,...al->...kl", U, dphi)
    detJ = det2(J)
    scale = float(np.max(np.ptp(X, axis=0)))
    if np.any(np.abs(detJ) < 1e-14 * scale**2):
        raise DegenerateMapError(f"singular geometric Jacobian on element {e}")
    return G @ np.linalg.inv(J)


# ---------------------------------------------------------------------------
# closed forms for radial data on the representative elements


def _trig(N: int, like):
    """cos/sin of pi/N, pi/2N and sin^2(pi/4N) in the arithmetic of ``like``."""
    if type(like).__module__.startswith("mpmath"):
        import mpmath as mp

        cos, sin, pi = mp.cos, mp.sin, mp.pi
    else:
        cos, sin, pi = math.cos, math.sin, math.pi
    return cos(pi / N), sin(pi / N), cos(pi / (2 * N)), sin(pi / (2 * N)), sin(pi / (4 * N)) ** 2


@dataclass(frozen=True)
class DetCoeffs:
    """Coefficients of the radial interpolant on the representative elements."""

    N: int
    s0: float
    s_half: float
    s1: float
    alpha1: float = field(init=False)
    alpha2: float = field(init=False)
    beta: float = field(init=False)
    gamma: float = field(init=False)
    bar_alpha1: float = field(init=False)
    bar_alpha2: float = field(init=False)
    bar_beta: float = field(init=False)
    bar_gamma: float = field(init=False)
    tilde_alpha1: float = field(init=False)
    tilde_alpha2: float = field(init=False)
    tilde_alpha3: float = field(init=False)

    def __post_init__(self):
        s0, sh, s1 = self.s0, self.s_half, self.s1
        c1, sn1, c2, sn2, _ = _trig(self.N, s0)
        vals = dict(
            alpha1=s0 + s1 - 2 * sh * c2,
            alpha2=-3 * s0 - s1 * c1 + 4 * sh * c2,
            beta=s1 * sn1 - 4 * sh * sn2,
            gamma=s1 * sn1 - 2 * sh * sn2,
            bar_alpha1=s0 + s1 - 2 * sh * c2,
            bar_alpha2=-3 * s1 - s0 * c1 + 4 * sh * c2,
            bar_beta=s0 * sn1 - 4 * sh * sn2,
            bar_gamma=s0 * sn1 - 2 * sh * sn2,
            tilde_alpha1=4 * sh - s1 - 3 * s0,
            tilde_alpha2=4 * c2 - c1 - 3,
            tilde_alpha3=s0 + s1 - 2 * sh,
        )
        for k, v in vals.items():
            object.__setattr__(self, k, v)


def H_polynomial(kind: str, c: DetCoeffs, y, z):
    """``det(d Pi v / d xh)`` as a polynomial in ``y = xh1+xh2``, ``z = xh1 xh2``.

    Evaluated in the arithmetic of the coefficients (float or mpmath).
    """
    S = _trig(c.N, c.s0)[3] ** 2
    if kind == "A":
        return (
            16 * c.gamma * c.alpha1 * y**2
            - 64 * c.s1 * c.gamma * S * z
            + (-8 * c.beta * (c.alpha1 - c.s1 * S) + 4 * c.gamma * c.alpha2) * y
            - 2 * c.beta * c.alpha2
        )
    if kind == "B":
        return (
            -16 * c.bar_gamma * c.bar_alpha1 * y**2
            + 64 * c.s0 * c.bar_gamma * S * z
            + (8 * c.bar_beta * (c.bar_alpha1 - c.s0 * S) - 4 * c.bar_gamma * c.bar_alpha2) * y
            + 2 * c.bar_beta * c.bar_alpha2
        )
    raise ValueError(f"no closed-form determinant for element kind {kind!r}; use the generic path")


def det_closed_form(elem, s0: float, s_half: float, s1: float, p) -> np.ndarray:
    """Closed-form ``det(d Pi v/d xh)`` on a type A or B element.

    ``s0, s_half, s1`` are the deformed radii at the inner, middle and outer
    radius of the element's ring.
    """
    kind = elem.kind if hasattr(elem, "kind") else elem[0]
    N = elem.N if hasattr(elem, "N") else elem[1]
    if kind not in ("A", "B"):
        raise ValueError(f"no closed-form determinant for element kind {kind!r}; use the generic path")
    p = np.asarray(p, dtype=float)
    y = p[..., 0] + p[..., 1]
    z = p[..., 0] * p[..., 1]
    return H_polynomial(kind, DetCoeffs(N, s0, s_half, s1), y, z)


def closed_form_interpolant(kind: str, N: int, s0: float, s_half: float, s1: float, p) -> np.ndarray:
    """Radial interpolant on the representative element, written out explicitly."""
    c = DetCoeffs(N, s0, s_half, s1)
    p = np.asarray(p, dtype=float)
    x1, x2 = p[..., 0], p[..., 1]
    y = x1 + x2
    S2 = math.sin(math.pi / (2 * N)) ** 2
    S4 = math.sin(math.pi / (4 * N)) ** 2
    sn2, c2 = math.sin(math.pi / (2 * N)), math.cos(math.pi / (2 * N))
    if kind == "A":
        X1 = s0 + c.alpha2 * y + 2 * c.alpha1 * y**2 - 4 * s1 * S2 * (x1**2 + x2**2)
        X2 = (2 * c.gamma * y - c.beta) * (x2 - x1)
    elif kind == "B":
        X1 = s1 + c.bar_alpha2 * y + 2 * c.bar_alpha1 * y**2 - 4 * s0 * S2 * (x1**2 + x2**2)
        X2 = (2 * c.bar_gamma * y - c.bar_beta) * (x1 - x2)
    elif kind == "C":
        X1 = (
            s0
            + c.tilde_alpha1 * x1
            + s0 * c.tilde_alpha2 * x2
            + 2 * c.tilde_alpha3 * x1**2
            - 8 * S4 * x2 * (s0 * c2 * x2 - (s0 - s_half) * x1)
        )
        X2 = 2 * sn2 * x2 * (s0 * (2 - c2) - 4 * s0 * S4 * x2 + 2 * (s_half - s0) * x1)
    elif kind == "D":
        X1 = (
            s0
            + s0 * c.tilde_alpha2 * x1
            + c.tilde_alpha1 * x2
            + 2 * c.tilde_alpha3 * x2**2
            - 8 * S4 * x1 * (s0 * c2 * x1 - (s0 - s_half) * x2)
        )
        X2 = -2 * sn2 * x1 * (s0 * (2 - c2) - 4 * s0 * S4 * x1 + 2 * (s_half - s0) * x2)
    else:
        raise ValueError(f"unknown element kind {kind!r}")
    return np.stack([X1, X2], axis=-1)


def template_nodes(kind: str, N: int, r0: float, rh: float, r1: float) -> np.ndarray:
    """Six nodes of the representative element with radii (inner, middle, outer)."""
    a, b = math.pi / N, math.pi / (2 * N)

    def P(r, t):
        return (r * math.cos(t), r * math.sin(t))

    table = {
        "A": [P(r0, 0), P(r1, -a), P(r1, a), P(rh, -b), P(rh, b), P(r1, 0)],
        "B": [P(r1, 0), P(r0, a), P(r0, -a), P(rh, b), P(rh, -b), P(r0, 0)],
        "C": [P(r0, 0), P(r1, 0), P(r0, a), P(rh, 0), P(r0, b), P(rh, b)],
        "D": [P(r0, 0), P(r0, -a), P(r1, 0), P(r0, -b), P(rh, 0), P(rh, -b)],
    }
    return np.array(table[kind])


# ---------------------------------------------------------------------------
# exact minima of quadratics on the reference triangle

# q(x1, x2) = c0 + c1 x1 + c2 x2 + c3 x1^2 + c4 x1 x2 + c5 x2^2
_VANDER = np.stack(
    [
        np.ones(6),
        REF_NODES[:, 0],
        REF_NODES[:, 1],
        REF_NODES[:, 0] ** 2,
        REF_NODES[:, 0] * REF_NODES[:, 1],
        REF_NODES[:, 1] ** 2,
    ],
    axis=-1,
)
_VANDER_INV = np.linalg.inv(_VANDER)


def quadratic_coeffs(node_values: np.ndarray) -> np.ndarray:
    """Monomial coefficients ``(..., 6)`` of the quadratic with given nodal values."""
    return node_values @ _VANDER_INV.T


def quadratic_eval(c: np.ndarray, x1, x2):
    return c[..., 0] + c[..., 1] * x1 + c[..., 2] * x2 + c[..., 3] * x1**2 + c[..., 4] * x1 * x2 + c[..., 5] * x2**2


def quadratic_min(c: np.ndarray) -> np.ndarray:
    """Exact minimum over the reference triangle of each quadratic in ``c``."""
    c = np.asarray(c, dtype=float)
    cands = [quadratic_eval(c, 0.0, 0.0), quadratic_eval(c, 1.0, 0.0), quadratic_eval(c, 0.0, 1.0)]

    def edge(a1, a2, pt):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(a2 != 0.0, -a1 / (2.0 * np.where(a2 != 0.0, a2, 1.0)), -1.0)
        t = np.where((t > 0.0) & (t < 1.0), t, 0.0)
        cands.append(quadratic_eval(c, *pt(t)))

    c0, c1, c2, c3, c4, c5 = np.moveaxis(c, -1, 0)
    edge(c1, c3, lambda t: (t, 0.0 * t))
    edge(c2, c5, lambda t: (0.0 * t, t))
    edge(-c1 + c2 - 2 * c3 + c4, c3 - c4 + c5, lambda t: (1.0 - t, t))
    det = 4.0 * c3 * c5 - c4 * c4
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(det != 0.0, det, 1.0)
        x1 = (-2.0 * c5 * c1 + c4 * c2) / safe
        x2 = (-2.0 * c3 * c2 + c4 * c1) / safe
    inside = (det != 0.0) & (x1 >= 0) & (x2 >= 0) & (x1 + x2 <= 1)
    x1 = np.where(inside, x1, 0.0)
    x2 = np.where(inside, x2, 0.0)
    cands.append(quadratic_eval(c, x1, x2))
    return np.min(np.stack(cands), axis=0)


def _det_node_values(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """det of the reference Jacobian of a quadratic map at the six nodes.

    Also returns a magnitude ``mag`` such that the round-off of each value
    is at most ``8 eps mag``: it combines the cancellation inside the
    Jacobian entries (``M = sum_a |X_a| |dphi_a|``) with that of the
    determinant itself.
    """
    dphi = shape_gradients(REF_NODES)  # (6 pts, 6 basis, 2)
    J = np.einsum("...ak,qal->...qkl", X, dphi)
    M = np.einsum("...ak,qal->...qkl", np.abs(X), np.abs(dphi))
    A = np.abs(J)
    mag = (
        A[..., 0, 0] * A[..., 1, 1]
        + A[..., 0, 1] * A[..., 1, 0]
        + M[..., 0, 0] * A[..., 1, 1]
        + A[..., 0, 0] * M[..., 1, 1]
        + M[..., 0, 1] * A[..., 1, 0]
        + A[..., 0, 1] * M[..., 1, 0]
    )
    return det2(J), mag


# max over the reference triangle of sum |phi_a| for the quadratic basis
_LEBESGUE = 5.0 / 3.0
_UNIT = np.finfo(float).eps


def _poly_error(vals: np.ndarray, mag: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Round-off bound for a quadratic built from nodal dets and evaluated anywhere in T."""
    nodal = 8.0 * _UNIT * mag.max(axis=-1)
    return _LEBESGUE * nodal + 16.0 * _UNIT * np.abs(coeffs).sum(axis=-1)


def _ratio_lower_bound(num: np.ndarray, den: np.ndarray, dnum, dden, iterations: int = 60):
    nmin = quadratic_min(num)
    dmin = quadratic_min(den) - dden
    dmax = -quadratic_min(-den) + dden
    certified = dmin > 0.0
    dmin_s = np.where(certified, dmin, 1.0)
    dmax_s = np.where(certified, dmax, 1.0)
    lo = np.where(nmin >= 0.0, nmin / dmax_s, nmin / dmin_s)
    probe = quadratic_eval(num, 1 / 3, 1 / 3) / np.where(certified, quadratic_eval(den, 1 / 3, 1 / 3), 1.0)
    hi = np.maximum(lo, probe)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        ok = quadratic_min(num - mid[..., None] * den) >= 0.0
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    # num - lo den >= 0 holds for the computed quadratics; widen by their
    # round-off (and that of the test itself) to cover the exact ones
    slack = (dnum + np.abs(lo) * dden + 16.0 * _UNIT * (np.abs(num).sum(-1) + np.abs(lo) * np.abs(den).sum(-1))) / dmin_s
    lo = lo - slack
    return np.where(certified, lo, -np.inf), certified


def _element_bounds(U: np.ndarray, X: np.ndarray):
    nv, nm = _det_node_values(U)
    dv, dm = _det_node_values(X)
    num, den = quadratic_coeffs(nv), quadratic_coeffs(dv)
    return _ratio_lower_bound(num, den, _poly_error(nv, nm, num), _poly_error(dv, dm, den))


def min_det_bounds(f: FEFunction) -> tuple[np.ndarray, np.ndarray]:
    """Certified lower bound of ``det grad f`` on every element.

    ``det grad f = num / den`` with ``num = det(df/dxh)`` and
    ``den = det(dx/dxh)``, both quadratic in the reference coordinates.
    The bound is the largest ``c`` (found by bisection) for which the
    quadratic ``num - c den`` is non-negative on the whole reference
    triangle; each test is an exact quadratic minimisation.  The result is
    then lowered by a round-off estimate for the floating-point
    construction of ``num`` and ``den``.

    Returns ``(bound, certified)``.  ``certified`` is false where the
    geometric Jacobian itself is not positive (the bound is then ``-inf``).
    """
    return _element_bounds(f.element_values(), f.mesh.coords())


def min_det_on_element(f: FEFunction, elem) -> float:
    """Lower bound of ``det grad f`` over one element (see :func:`min_det_bounds`)."""
    e = elem if isinstance(elem, (int, np.integer)) else elem.index
    return float(_element_bounds(f.element_values()[e], f.mesh.coords()[e])[0])


# ---------------------------------------------------------------------------
# orientation report


@dataclass
class OrientationReport:
    bounds: np.ndarray  # per-element lower bound of det grad f
    certified: np.ndarray
    kinds: np.ndarray
    layers: np.ndarray
    inner_corners: list[tuple[int, int, float]]  # (element, node id, det) on |x| = eps0

    @property
    def positive(self) -> bool:
        return bool(np.all(self.bounds > 0.0))

    @property
    def failing(self) -> np.ndarray:
        return np.flatnonzero(~(self.bounds > 0.0))

    @property
    def min_bound(self) -> float:
        return float(self.bounds.min())

    def inner_corner_min(self) -> float:
        return min(v for _, _, v in self.inner_corners)

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element", "kind", "layer", "min_det_bound", "certified"])
            for e, b in enumerate(self.bounds):
                w.writerow([e, self.kinds[e], int(self.layers[e]), f"{b:.17g}", int(self.certified[e])])


def orientation_report(f: FEFunction) -> OrientationReport:
    """Per-element determinant bounds plus explicit inner-boundary corner values.

    Orientation failures show up first at element corners on the cavity
    surface, so those values are listed separately.
    """
    mesh = f.mesh
    bounds, certified = min_det_bounds(f)
    inner = set(mesh.inner_boundary.tolist())
    corners = []
    vert_pts = REF_NODES[:3]
    for e in np.flatnonzero(np.isin(mesh.conn[:, :3], mesh.inner_boundary).any(axis=1)):
        G = eval_gradient(f, int(e), vert_pts)
        dets = det2(G)
        for a in range(3):
            nid = int(mesh.conn[e, a])
            if nid in inner:
                corners.append((int(e), nid, float(dets[a])))
    return OrientationReport(bounds, certified, mesh.kinds.copy(), mesh.layer_of.copy(), corners)
