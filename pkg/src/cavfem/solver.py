"""Energy minimisation over the FE space with Dirichlet data ``lambda x`` on |x| = 1.

The optimiser is a preconditioned L-BFGS with backtracking.  A trial step is
accepted only if the energy satisfies the Armijo condition *and*
``det grad u >= det_floor`` at every quadrature point, so every accepted
iterate is orientation preserving.

The initial inverse-Hessian of L-BFGS is a sparse factorisation of a
positive definite majorant of the energy Hessian at a recent iterate,
refreshed every ``precond_refresh`` iterations.
"""

from __future__ import annotations

import csv
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from cavfem.energy import EnergyAssembler, EnergyBreakdown, MaterialModel, cofactor, total_energy
from cavfem.fem import FEFunction, MeshQuadrature, OrientationReport, interpolate, orientation_report, radial_field
from cavfem.meshgen import AnnulusMesh
from cavfem.quadrature import QuadratureRule
from cavfem.radial import RadialProfile, eval_r


class SolverError(RuntimeError):
    def __init__(self, msg: str, result: "SolveResult | None" = None):
        super().__init__(msg)
        self.result = result


class LineSearchError(SolverError):
    pass


class MaxIterationsError(SolverError):
    pass


class InfeasibleGuessError(SolverError):
    def __init__(self, msg: str, report: OrientationReport | None = None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class SolveSettings:
    gtol: float = 1e-10  # on |grad|/sqrt(N_d), relative to 1 + |E|
    max_iter: int = 5000
    contraction: float = 0.5
    max_backtracks: int = 60
    armijo: float = 1e-4
    det_floor: float = 1e-10
    initial_guess: str = "interpolated-oracle"
    history: int = 20
    first_step: float = 1.0  # multiplier of the first trial step of every line search
    precond_refresh: int = 20
    lam: float = 2.0

    def __post_init__(self):
        for k in ("gtol", "max_iter", "max_backtracks", "armijo", "det_floor", "history", "first_step", "lam"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if not 0.0 < self.contraction < 1.0:
            raise ValueError("contraction must lie in (0, 1)")
        if self.initial_guess not in ("interpolated-oracle", "scaled-identity"):
            raise ValueError(f"unknown initial guess policy {self.initial_guess!r}")


@dataclass
class IterateRecord:
    iteration: int
    energy: float
    grad_norm: float
    step: float
    min_det: float


@dataclass
class SolveResult:
    u_h: FEFunction
    iterations: int
    grad_norm: float
    energy: EnergyBreakdown
    orientation: OrientationReport
    history: list[IterateRecord] = field(default_factory=list)
    converged: bool = True
    wall_s: float = 0.0

    def write_log(self, path) -> None:
        write_iterate_log(self.history, path)


def write_iterate_log(history, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "energy", "grad_norm", "step", "min_det"])
        for h in history:
            w.writerow([h.iteration, f"{h.energy:.17g}", f"{h.grad_norm:.17g}", f"{h.step:.17g}", f"{h.min_det:.17g}"])


def apply_dirichlet(mesh: AnnulusMesh, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """``(mask, values)``: per-node constraint flag and prescribed positions ``lambda x``."""
    if len(mesh.outer_boundary) == 0:
        raise ValueError("mesh has no outer boundary")
    mask = np.zeros(mesh.n_nodes, dtype=bool)
    mask[mesh.outer_boundary] = True
    values = np.zeros((mesh.n_nodes, 2))
    values[mask] = lam * mesh.nodes[mask]
    return mask, values


def oracle_field(profile: RadialProfile):
    return radial_field(lambda R: eval_r(profile, R))


def initial_guess(
    mesh: AnnulusMesh, policy: str = "interpolated-oracle", profile: RadialProfile | None = None, lam: float = 2.0
) -> FEFunction:
    """Starting iterate; raises :class:`InfeasibleGuessError` if not orientation positive."""
    if policy == "interpolated-oracle":
        if profile is None:
            raise ValueError("the interpolated-oracle policy needs a radial profile")
        f = interpolate(mesh, oracle_field(profile))
    elif policy == "scaled-identity":
        f = interpolate(mesh, lambda x: lam * x)
    else:
        raise ValueError(f"unknown initial guess policy {policy!r}")
    rep = orientation_report(f)
    if not rep.positive:
        raise InfeasibleGuessError(
            f"initial guess ({policy}) is not orientation preserving on {len(rep.failing)} elements "
            f"(min det bound {rep.min_bound:.3e})",
            rep,
        )
    return f


class _Preconditioner:
    """SPD majorant of the energy Hessian, frozen between refreshes.

    Pointwise tangent: ``omega p |F|^{p-2} (I + (p-2) Fh x Fh)`` (positive
    since p > 1), plus ``g''(det) cof F x cof F``, plus ``|g'(det)| I`` in
    place of the indefinite ``g'(det) d cof F / dF`` term.
    """

    def __init__(self, asm: EnergyAssembler, free_nodes: np.ndarray):
        self.asm = asm
        conn = np.concatenate([g.conn for g in asm.quad]) if len(asm.quad.groups) else asm.mesh.conn
        dofs = np.stack([2 * conn, 2 * conn + 1], axis=-1).reshape(len(conn), 12)  # (a, i) -> 2a + i
        self._rows = np.repeat(dofs, 12, axis=1).ravel()
        self._cols = np.tile(dofs, (1, 12)).ravel()
        self.free = np.stack([2 * free_nodes, 2 * free_nodes + 1], axis=-1).ravel()

    def _element_matrices(self, cache, U: np.ndarray) -> np.ndarray:
        m = self.asm.m
        F = cache.gradients(U)
        n2 = np.sum(F * F, axis=(-2, -1))
        d = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        Fh = F / np.sqrt(n2)[..., None, None]
        cof = cofactor(F)
        eye = np.einsum("ij,kl->ikjl", np.eye(2), np.eye(2))
        a = m.omega * m.p * n2 ** (m.p / 2 - 1)
        A = (a + np.abs(m.dg(d)))[..., None, None, None, None] * eye
        A += (a * (m.p - 2.0))[..., None, None, None, None] * np.einsum("...ik,...jl->...ikjl", Fh, Fh)
        A += m.d2g(d)[..., None, None, None, None] * np.einsum("...ik,...jl->...ikjl", cof, cof)
        A *= cache.dx[..., None, None, None, None]
        return np.einsum("eqak,eqikjl,eqbl->eaibj", cache.grad_phi, A, cache.grad_phi).reshape(-1, 12, 12)

    def update(self, U: np.ndarray) -> None:
        Ke = np.concatenate([self._element_matrices(g, U) for g in self.asm.quad])
        n = 2 * self.asm.mesh.n_nodes
        K = sp.coo_matrix((Ke.ravel(), (self._rows, self._cols)), shape=(n, n)).tocsr()
        self._solve = spla.factorized(K[self.free][:, self.free].tocsc())

    def apply(self, g: np.ndarray) -> np.ndarray:
        """``K^{-1} g`` for ``g`` of shape (n_free, 2)."""
        return self._solve(g.ravel()).reshape(-1, 2)


def minimize(
    mesh: AnnulusMesh,
    m: MaterialModel,
    settings: SolveSettings = SolveSettings(),
    *,
    profile: RadialProfile | None = None,
    start: FEFunction | None = None,
    q: QuadratureRule | MeshQuadrature | None = None,
    log=None,
) -> SolveResult:
    """Minimise the total energy with ``u = lambda x`` on the outer boundary.

    ``start`` overrides the initial-guess policy; its constrained values are
    replaced by the Dirichlet data.  ``log`` is an optional callable receiving
    each :class:`IterateRecord`.
    """
    t_start = time.perf_counter()
    lam = settings.lam
    mask, bc = apply_dirichlet(mesh, lam)
    if start is None:
        start = initial_guess(mesh, settings.initial_guess, profile, lam)
    U = np.array(start.values, dtype=float)
    U[mask] = bc[mask]
    free = np.flatnonzero(~mask)
    asm = EnergyAssembler(mesh, m, q)
    n_d = 2 * mesh.n_nodes

    E, G, dmin = asm.energy_and_grad(U)
    if not math.isfinite(E) or dmin < settings.det_floor:
        raise InfeasibleGuessError(f"initial iterate violates det >= {settings.det_floor:g} (min det {dmin:.3e})")
    pre = _Preconditioner(asm, free)
    pre.update(U)
    S, Y = deque(maxlen=settings.history), deque(maxlen=settings.history)
    history = [IterateRecord(0, E, float(np.linalg.norm(G[free])) / math.sqrt(n_d), 0.0, dmin)]
    if log:
        log(history[-1])

    def result(converged, it):
        u = FEFunction(mesh, U)
        return SolveResult(
            u,
            it,
            history[-1].grad_norm,
            total_energy(u, m, asm.quad),
            orientation_report(u),
            history,
            converged,
            time.perf_counter() - t_start,
        )

    for it in range(1, settings.max_iter + 1):
        g = G[free]
        gnorm = float(np.linalg.norm(g)) / math.sqrt(n_d)
        if gnorm <= settings.gtol * (1.0 + abs(E)):
            return result(True, it - 1)
        if it % settings.precond_refresh == 0:
            pre.update(U)
        # two-loop recursion with H0 = K^{-1}
        qv = g.copy()
        alphas = []
        for s, y, rho in reversed(list(zip(S, Y, _rhos(S, Y)))):
            a = rho * np.sum(s * qv)
            alphas.append(a)
            qv -= a * y
        r = pre.apply(qv)
        for (s, y, rho), a in zip(zip(S, Y, _rhos(S, Y)), reversed(alphas)):
            b = rho * np.sum(y * r)
            r += (a - b) * s
        d = -r
        slope = float(np.sum(d * g))
        if not slope < 0.0:
            S.clear()
            Y.clear()
            d = -pre.apply(g)
            slope = float(np.sum(d * g))
        t = settings.first_step
        accepted = False
        for _ in range(settings.max_backtracks):
            Un = U.copy()
            Un[free] += t * d
            En, Gn, dn = asm.energy_and_grad(Un)
            if math.isfinite(En) and dn >= settings.det_floor and En <= E + settings.armijo * t * slope:
                accepted = True
                break
            t *= settings.contraction
        if not accepted:
            # energy differences below round-off: nothing representable is left to gain
            if abs(slope) <= 1e-15 * (1.0 + abs(E)):
                return result(True, it - 1)
            raise LineSearchError(f"no admissible step at iteration {it}", result(False, it - 1))
        s_new = t * d
        y_new = Gn[free] - g
        if np.sum(s_new * y_new) > 1e-16 * np.sqrt(np.sum(s_new**2) * np.sum(y_new**2)):
            S.append(s_new)
            Y.append(y_new)
        U, E, G = Un, En, Gn
        history.append(IterateRecord(it, E, float(np.linalg.norm(G[free])) / math.sqrt(n_d), t, dn))
        if log:
            log(history[-1])
    g = G[free]
    if float(np.linalg.norm(g)) / math.sqrt(n_d) <= settings.gtol * (1.0 + abs(E)):
        return result(True, settings.max_iter)
    raise MaxIterationsError(f"no convergence in {settings.max_iter} iterations", result(False, settings.max_iter))


def _rhos(S, Y):
    return [1.0 / float(np.sum(s * y)) for s, y in zip(S, Y)]
