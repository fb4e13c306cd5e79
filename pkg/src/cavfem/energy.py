"""Stored energy ``W(F) = omega |F|^p + g(det F)`` and its FE assembly.

``|F|`` is the Frobenius norm and ``g(x) = a ((x - 1)^2 / 2 + 1 / x)``.  The
energy splits into ``E1 = omega int |grad u|^p`` and ``E2 = int g(det grad u)``.

Configurations with ``det grad u <= 0`` at any quadrature point get the
energy ``+inf`` rather than an exception, so that line searches can treat
them as rejected steps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cavfem.fem import FEFunction, GeometryCache, MeshQuadrature, det2
from cavfem.meshgen import AnnulusMesh, energy_gauge
from cavfem.quadrature import QuadratureRule, graded_rule


@dataclass(frozen=True)
class MaterialModel:
    omega: float = 2.0 / 3.0
    p: float = 1.5
    g_scale: float = 2.0**-0.25

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if not 1.0 < self.p < 2.0:
            raise ValueError("p must lie in (1, 2)")
        if not self.g_scale > 0:
            raise ValueError("g_scale must be positive")

    def g(self, d):
        return self.g_scale * (0.5 * (d - 1.0) ** 2 + 1.0 / d)

    def dg(self, d):
        return self.g_scale * ((d - 1.0) - 1.0 / d**2)

    def d2g(self, d):
        return self.g_scale * (1.0 + 2.0 / d**3)


def cofactor(F: np.ndarray) -> np.ndarray:
    """``cof F = det(F) F^{-T}`` for 2x2 matrices (last two axes)."""
    C = np.empty_like(F)
    C[..., 0, 0] = F[..., 1, 1]
    C[..., 0, 1] = -F[..., 1, 0]
    C[..., 1, 0] = -F[..., 0, 1]
    C[..., 1, 1] = F[..., 0, 0]
    return C


def _check_det(d) -> None:
    if np.any(~(np.asarray(d) > 0.0)):
        raise ValueError("stored energy is only defined for det F > 0")


def density(F, m: MaterialModel):
    """``W(F)``; ``F`` may carry leading batch axes."""
    F = np.asarray(F, dtype=float)
    d = det2(F)
    _check_det(d)
    nrm = np.sqrt(np.sum(F * F, axis=(-2, -1)))
    return m.omega * nrm**m.p + m.g(d)


def density_grad(F, m: MaterialModel):
    """``dW/dF = omega p |F|^{p-2} F + g'(det F) cof F``."""
    F = np.asarray(F, dtype=float)
    d = det2(F)
    _check_det(d)
    nrm = np.sqrt(np.sum(F * F, axis=(-2, -1)))
    return (m.omega * m.p * nrm ** (m.p - 2.0))[..., None, None] * F + m.dg(d)[..., None, None] * cofactor(F)


def _pointwise(F: np.ndarray, m: MaterialModel):
    """(w1, w2, det) at every point; entries with det <= 0 are +inf."""
    d = det2(F)
    ok = d > 0.0
    nrm = np.sqrt(np.sum(F * F, axis=(-2, -1)))
    w1 = m.omega * nrm**m.p
    with np.errstate(divide="ignore"):
        w2 = np.where(ok, m.g(np.where(ok, d, 1.0)), np.inf)
    return w1, w2, d


@dataclass
class EnergyBreakdown:
    E1: float
    E2: float
    per_layer: list[tuple[int, float, float, float]] = field(default_factory=list)
    layer_data: list[tuple[float, float, int]] = field(default_factory=list)  # (eps, tau, N)
    infeasible: list[int] = field(default_factory=list)  # elements with det <= 0

    @property
    def total(self) -> float:
        return self.E1 + self.E2

    @property
    def feasible(self) -> bool:
        return not self.infeasible

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "eps", "tau", "N", "E1", "E2", "A(eps,tau)"])
            for (i, e1, e2, A), (eps, tau, N) in zip(self.per_layer, self.layer_data):
                w.writerow([i, f"{eps:.17g}", f"{tau:.17g}", N, f"{e1:.17g}", f"{e2:.17g}", f"{A:.17g}"])


def _elem(elem) -> int:
    return int(elem) if isinstance(elem, (int, np.integer)) else elem.index


def mesh_quadrature(mesh: AnnulusMesh, q: QuadratureRule | MeshQuadrature | None = None) -> MeshQuadrature:
    """``q`` as a :class:`MeshQuadrature`; ``None`` selects the graded default."""
    if isinstance(q, MeshQuadrature):
        return q
    return MeshQuadrature(mesh, q)


def element_energy(f: FEFunction, elem, m: MaterialModel, q: QuadratureRule | None = None) -> tuple[float, float]:
    """``(E1, E2)`` on one element; ``E2 = +inf`` if ``det grad f <= 0`` somewhere.

    Without ``q`` the element's graded rule is used.
    """
    e = _elem(elem)
    mesh = f.mesh
    if q is None:
        q = graded_rule(str(mesh.kinds[e]), float(mesh.elem_tau[e] / mesh.elem_eps[e]))
    cache = GeometryCache.for_rule(mesh, q, elements=[e])
    F = cache.gradients(f.values)
    w1, w2, _ = _pointwise(F, m)
    dx = cache.dx
    return float(np.sum(w1 * dx)), float(np.sum(w2 * dx))


def element_energies(quad: MeshQuadrature | GeometryCache, U: np.ndarray, m: MaterialModel):
    """Per-element ``(E1, E2, min det)`` arrays for nodal values ``U``."""
    groups = [quad] if isinstance(quad, GeometryCache) else list(quad)
    ne = groups[0].mesh.n_elements if groups else 0
    e1, e2, dmin = np.zeros(ne), np.zeros(ne), np.full(ne, np.inf)
    for g in groups:
        F = g.gradients(U)
        w1, w2, d = _pointwise(F, m)
        dx = g.dx
        e1[g.elements] = np.sum(w1 * dx, axis=1)
        e2[g.elements] = np.sum(w2 * dx, axis=1)
        dmin[g.elements] = d.min(axis=1)
    return e1, e2, dmin


def total_energy(
    f: FEFunction, m: MaterialModel, q: QuadratureRule | MeshQuadrature | None = None
) -> EnergyBreakdown:
    """Energy of ``f`` with per-layer totals.

    ``q`` is a single rule for every element, a prepared
    :class:`MeshQuadrature`, or ``None`` for the graded default.  Sums are
    taken with :func:`math.fsum`, so the result does not depend on element
    order.
    """
    mesh = f.mesh
    if mesh.n_elements == 0:
        return EnergyBreakdown(0.0, 0.0)
    e1, e2, dmin = element_energies(mesh_quadrature(mesh, q), f.values, m)
    bad = np.flatnonzero(~(dmin > 0.0)).tolist()
    per_layer, layer_data = [], []
    sched = mesh.schedule
    for i in np.unique(mesh.layer_of):
        sel = mesh.layer_of == i
        L = sched.layers[int(i)] if sched is not None and int(i) < len(sched.layers) else None
        eps, tau, N = (L.eps, L.tau, L.N) if L else (float("nan"), float("nan"), 0)
        A = float(energy_gauge(eps, tau, m.p)) if L else float("nan")
        per_layer.append((int(i), math.fsum(e1[sel]), math.fsum(e2[sel]), A))
        layer_data.append((eps, tau, N))
    return EnergyBreakdown(math.fsum(e1), math.fsum(e2), per_layer, layer_data, bad)


class EnergyAssembler:
    """Repeated energy/gradient evaluation on a fixed mesh (used by the solver)."""

    def __init__(self, mesh: AnnulusMesh, m: MaterialModel, q: QuadratureRule | MeshQuadrature | None = None):
        self.mesh = mesh
        self.m = m
        self.quad = mesh_quadrature(mesh, q)

    def min_det(self, U: np.ndarray) -> float:
        return float(min(det2(g.gradients(U)).min() for g in self.quad))

    def energy(self, U: np.ndarray) -> float:
        e1, e2, _ = element_energies(self.quad, U, self.m)
        if not np.all(np.isfinite(e2)):
            return math.inf
        return math.fsum(e1) + math.fsum(e2)

    def energy_and_grad(self, U: np.ndarray):
        """``(E, dE/dU, min det)``; ``E = inf`` and gradient ``None`` if infeasible."""
        n = self.mesh.n_nodes
        parts, G, dmin = [], np.zeros((n, 2)), math.inf
        for g in self.quad:
            F = g.gradients(U)
            w1, w2, d = _pointwise(F, self.m)
            dmin = min(dmin, float(d.min()))
            if not dmin > 0.0:
                return math.inf, None, dmin
            dx = g.dx
            parts.append(np.sum((w1 + w2) * dx, axis=1))
            P = density_grad(F, self.m) * dx[..., None, None]
            ge = np.einsum("eqkl,eqal->eak", P, g.grad_phi)  # (ne, 6, 2)
            ids = g.conn.ravel()
            for k in range(2):
                G[:, k] += np.bincount(ids, weights=ge[..., k].ravel(), minlength=n)
        E = math.fsum(np.concatenate(parts)) if parts else 0.0
        return E, G, dmin
