"""Reference radial cavity solution ``u(x) = r(|x|) x / |x|``.

The 1-D energy

    E(r) = 2 pi int_{eps0}^1 [omega (r'^2 + r^2/R^2)^{p/2} + g(r r'/R)] R dR

is minimised over C^1 piecewise-cubic (Hermite) functions on a geometric
grid ``R_j = eps0^{1 - j/K}`` with ``r(1) = lambda`` and no condition at
``eps0`` (the traction-free condition there is natural).  Grids for K and
2K are nested, so refined energies never increase.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from cavfem.energy import MaterialModel
from cavfem.quadrature import gauss_legendre


class RadialSolveError(RuntimeError):
    pass


# slack allowed when evaluating just outside [eps0, 1] (curved element
# edges deviate from the circles by O(h^4) relative)
_DOMAIN_SLACK = 1e-4


@dataclass(frozen=True, eq=False)
class RadialProfile:
    grid: np.ndarray
    r: np.ndarray
    dr: np.ndarray
    energy: float
    material: MaterialModel
    eps0: float
    lam: float
    scheme: str = "cubic-hermite"
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.grid) - 1

    @property
    def m_lower(self) -> float:
        """Largest ``m`` with ``m R <= r'(R)`` on the grid."""
        return float(np.min(self.dr / self.grid))

    @property
    def M_upper(self) -> float:
        return float(np.max(self.dr / self.grid))

    def _locate(self, R):
        R = np.asarray(R, dtype=float)
        lo, hi = self.grid[0], self.grid[-1]
        if np.any(R < lo * (1 - _DOMAIN_SLACK)) or np.any(R > hi * (1 + _DOMAIN_SLACK)) or np.any(np.isnan(R)):
            raise ValueError(f"R outside the profile domain [{lo}, {hi}]")
        j = np.clip(np.searchsorted(self.grid, R, side="right") - 1, 0, self.K - 1)
        hc = self.grid[j + 1] - self.grid[j]
        return R, j, hc, (R - self.grid[j]) / hc

    def __call__(self, R):
        return eval_r(self, R)


def _hermite(t):
    t2, t3 = t * t, t * t * t
    v = np.stack([2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + t, -2 * t3 + 3 * t2, t3 - t2], axis=-1)
    d = np.stack([6 * t2 - 6 * t, 3 * t2 - 4 * t + 1, -6 * t2 + 6 * t, 3 * t2 - 2 * t], axis=-1)
    return v, d


def eval_r(profile: RadialProfile, R):
    """``r(R)`` from the Hermite cubic of the containing cell."""
    R, j, hc, t = profile._locate(R)
    v, _ = _hermite(t)
    ra, rb = profile.r[j], profile.r[j + 1]
    out = ra + ((rb - ra) * v[..., 2] + hc * (v[..., 1] * profile.dr[j] + v[..., 3] * profile.dr[j + 1]))
    return out if out.ndim else float(out)


def eval_r_prime(profile: RadialProfile, R):
    R, j, hc, t = profile._locate(R)
    _, d = _hermite(t)
    out = (profile.r[j + 1] - profile.r[j]) * d[..., 2] / hc + d[..., 1] * profile.dr[j] + d[..., 3] * profile.dr[j + 1]
    return out if out.ndim else float(out)


def log_grid(eps0: float, K: int) -> np.ndarray:
    R = eps0 ** (1.0 - np.arange(K + 1) / K)
    R[0], R[-1] = eps0, 1.0
    return R


class _Discrete:
    """Energy, gradient and banded Hessian of the 1-D Hermite discretisation."""

    def __init__(self, m: MaterialModel, grid: np.ndarray, ngauss: int = 5):
        self.m = m
        self.grid = grid
        K = len(grid) - 1
        self.K = K
        t, w = gauss_legendre(ngauss)
        self.hc = np.diff(grid)  # (K,)
        self.Rq = grid[:-1, None] + self.hc[:, None] * t[None, :]  # (K, ng)
        v, d = _hermite(t)
        h = self.hc[:, None, None]
        scale_v = np.array([1.0, 0.0, 1.0, 0.0])[None, None, :] + np.array([0.0, 1.0, 0.0, 1.0])[None, None, :] * h
        scale_d = np.array([1.0, 0.0, 1.0, 0.0])[None, None, :] / h + np.array([0.0, 1.0, 0.0, 1.0])[None, None, :]
        self.phi = v[None] * scale_v  # (K, ng, 4)
        self.psi = d[None] * scale_d
        self.wq = 2.0 * math.pi * w[None, :] * self.hc[:, None] * self.Rq  # measure incl. 2 pi R dR
        base = 2 * np.arange(K)
        self.dofs = np.stack([base, base + 1, base + 2, base + 3], axis=1)  # (K, 4)
        ii = np.repeat(self.dofs, 4, axis=1).ravel()
        jj = np.tile(self.dofs, (1, 4)).ravel()
        self._ij = (ii, jj)
        self.n = 2 * (K + 1)

    def fields(self, x):
        """``(r, r')`` at the quadrature points for dofs ``x`` of shape (2, n).

        ``x[0] + x[1]`` is an unevaluated (hi, lo) sum.  Radii are needed
        to more than double precision: on the cells next to the cavity one
        ulp of ``r`` is a large change of ``r'``.  Jumps ``r_b - r_a`` of
        the hi parts are exact, so ``r'`` comes out accurate.
        """
        hi, lo = x
        ia, ib = self.dofs[:, 0], self.dofs[:, 2]
        jump = ((hi[ib] - hi[ia]) + (lo[ib] - lo[ia]))[:, None]
        ra = (hi[ia] + lo[ia])[:, None]
        da, db = hi[self.dofs[:, 1]][:, None], hi[self.dofs[:, 3]][:, None]
        r = ra + (jump * self.phi[..., 2] + self.phi[..., 1] * da + self.phi[..., 3] * db)
        dr = jump * self.psi[..., 2] + self.psi[..., 1] * da + self.psi[..., 3] * db
        return r, dr

    def feasible(self, x) -> bool:
        r, dr = self.fields(x)
        return bool(np.all(r * dr > 0.0) and np.all(r > 0.0))

    def energy(self, x) -> float:
        r, dr = self.fields(x)
        d = r * dr / self.Rq
        if not np.all(d > 0.0):
            return math.inf
        m = self.m
        s = dr**2 + (r / self.Rq) ** 2
        f = m.omega * s ** (m.p / 2) + m.g(d)
        return math.fsum((f * self.wq).ravel())

    def derivatives(self, x):
        m = self.m
        R = self.Rq
        r, dr = self.fields(x)
        s = dr**2 + (r / R) ** 2
        d = r * dr / R
        a = m.omega * (m.p / 2) * s ** (m.p / 2 - 1)
        b = m.omega * (m.p / 2) * (m.p / 2 - 1) * s ** (m.p / 2 - 2)
        sr, sd = 2 * r / R**2, 2 * dr
        g1, g2 = m.dg(d), m.d2g(d)
        dr_, dd_ = dr / R, r / R
        f_r = a * sr + g1 * dr_
        f_d = a * sd + g1 * dd_
        f_rr = b * sr * sr + a * 2 / R**2 + g2 * dr_ * dr_
        f_dd = b * sd * sd + a * 2 + g2 * dd_ * dd_
        f_rd = b * sr * sd + g2 * dr_ * dd_ + g1 / R
        w = self.wq
        ge = np.einsum("kq,kqi->ki", w * f_r, self.phi) + np.einsum("kq,kqi->ki", w * f_d, self.psi)
        He = (
            np.einsum("kq,kqi,kqj->kij", w * f_rr, self.phi, self.phi)
            + np.einsum("kq,kqi,kqj->kij", w * f_rd, self.phi, self.psi)
            + np.einsum("kq,kqi,kqj->kij", w * f_rd, self.psi, self.phi)
            + np.einsum("kq,kqi,kqj->kij", w * f_dd, self.psi, self.psi)
        )
        g = np.zeros(self.n)
        np.add.at(g, self.dofs, ge)
        H = sp.coo_matrix((He.ravel(), self._ij), shape=(self.n, self.n)).tocsc()
        return g, H


def _initial(grid, lam, how: str):
    if how == "cavity":
        r = np.sqrt(lam**2 - 1.0 + grid**2)
        return r, grid / r
    if how == "identity":
        return lam * grid, np.full_like(grid, lam)
    raise ValueError(f"unknown initial guess {how!r}")


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _add(x, free, step):
    """(hi, lo) + step on the free dofs, without losing the low-order bits."""
    out = x.copy()
    hi, err = _two_sum(x[0, free], step)
    out[0, free], out[1, free] = _two_sum(hi, x[1, free] + err)
    return out


def _newton(disc: _Discrete, x, free, tol_rel, max_iter):
    E = disc.energy(x)
    if not math.isfinite(E):
        raise RadialSolveError("initial radial profile is not admissible")
    gnorm = math.inf
    for it in range(max_iter):
        g, H = disc.derivatives(x)
        gf = g[free]
        gnorm = float(np.linalg.norm(gf))
        if gnorm <= tol_rel * (1.0 + abs(E)):
            return x, E, gnorm, it
        Hf = H[free][:, free]
        step = None
        shift = 0.0
        diag = np.abs(Hf.diagonal()) + 1e-300
        for _ in range(30):
            A = Hf if shift == 0.0 else Hf + sp.diags(shift * diag)
            try:
                cand = -spla.spsolve(A.tocsc(), gf)
            except RuntimeError:
                cand = None
            if cand is not None and np.all(np.isfinite(cand)) and cand @ gf < 0.0:
                step = cand
                break
            shift = 1e-8 if shift == 0.0 else shift * 10.0
        if step is None:
            step = -gf / diag
        if abs(step @ gf) <= 1e-13 * (1.0 + abs(E)):
            # the predicted decrease is below the resolution of E: take the
            # full step if it is admissible and reduces the gradient
            xn = _add(x, free, step)
            En = disc.energy(xn)
            if not math.isfinite(En) or np.linalg.norm(disc.derivatives(xn)[0][free]) >= gnorm:
                break
            x, E = xn, En
            continue
        t, accepted = 1.0, False
        for _ in range(60):
            xn = _add(x, free, t * step)
            En = disc.energy(xn)
            if math.isfinite(En) and En <= E + 1e-4 * t * (step @ gf):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise RadialSolveError(f"line search failed at Newton iteration {it} (|grad| = {gnorm:.3e})")
        x, E = xn, En
    g, _ = disc.derivatives(x)
    gnorm = float(np.linalg.norm(g[free]))
    if gnorm <= tol_rel * (1.0 + abs(E)):
        return x, E, gnorm, max_iter
    raise RadialSolveError(f"radial Newton stalled at |grad| = {gnorm:.3e} (tolerance {tol_rel:g} (1 + |E|))")


def solve_radial(
    m: MaterialModel,
    eps0: float,
    lam: float,
    K: int = 1024,
    *,
    initial: str = "cavity",
    tol: float = 1e-10,
    max_iter: int = 200,
    cache_dir=None,
) -> RadialProfile:
    """Minimise the 1-D radial energy on a K-cell geometric grid.

    ``initial`` is ``"cavity"`` for ``r = sqrt(lam^2 - 1 + R^2)`` or
    ``"identity"`` for ``r = lam R``.  With ``cache_dir`` (or the
    ``CAVFEM_CACHE`` environment variable) profiles are reused from disk.
    """
    if not 0.0 < eps0 < 1.0:
        raise ValueError("eps0 must lie in (0, 1)")
    if not lam >= 1.0:
        raise ValueError("lambda must be >= 1")
    if K < 256:
        raise ValueError("K must be >= 256")
    cache_dir = cache_dir if cache_dir is not None else os.environ.get("CAVFEM_CACHE")
    path = None
    if cache_dir:
        key = hashlib.sha256(repr((m.omega, m.p, m.g_scale, eps0, lam, K, initial, tol)).encode()).hexdigest()[:20]
        path = Path(cache_dir) / f"radial-{key}.txt"
        if path.exists():
            return read_profile(path)
    grid = log_grid(eps0, K)
    disc = _Discrete(m, grid)
    r0, d0 = _initial(grid, lam, initial)
    x = np.zeros((2, disc.n))
    x[0, 0::2], x[0, 1::2] = r0, d0
    free = np.ones(disc.n, dtype=bool)
    free[2 * K] = False  # r(1) = lambda
    x[0, 2 * K] = lam
    x, E, gnorm, its = _newton(disc, x, free, tol, max_iter)
    xs = x[0] + x[1]
    prof = RadialProfile(
        grid, xs[0::2].copy(), xs[1::2].copy(), E, m, eps0, lam, meta={"iterations": its, "grad_norm": gnorm}
    )
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_profile(prof, path)
    return prof


def radial_energy(profile: RadialProfile, ngauss: int = 5) -> float:
    """Re-evaluate the 1-D energy of a stored profile."""
    disc = _Discrete(profile.material, profile.grid, ngauss)
    x = np.zeros((2, disc.n))
    x[0, 0::2], x[0, 1::2] = profile.r, profile.dr
    return disc.energy(x)


def check_profile(profile: RadialProfile, dense: int = 20) -> list[str]:
    """Violated invariants of a profile (empty list == fine)."""
    out = []
    R, r = profile.grid, profile.r
    if not np.all(np.diff(r) > 0):
        out.append("r not increasing on the grid")
    dd = np.diff(r) / np.diff(R)
    if not np.all(np.diff(dd) > 0):
        out.append("divided differences not increasing (r not convex)")
    if not r.min() > 0:
        out.append("r(eps0) <= 0: no cavity")
    if r[-1] != profile.lam:
        out.append("r(1) != lambda")
    t = np.linspace(0, 1, dense + 1)
    Rd = (R[:-1, None] + np.diff(R)[:, None] * t).ravel()
    if not np.all(eval_r(profile, Rd) * eval_r_prime(profile, Rd) / Rd > 0):
        out.append("det grad u <= 0 somewhere")
    return out


def write_profile(profile: RadialProfile, path) -> None:
    m = profile.material
    lines = [
        f"# material omega={m.omega!r} p={m.p!r} g_scale={m.g_scale!r}",
        f"# eps0={profile.eps0!r} lambda={profile.lam!r} K={profile.K}",
        f"# energy={profile.energy!r}",
        "# R r dr",
    ]
    lines += [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in zip(profile.grid, profile.r, profile.dr)]
    Path(path).write_text("\n".join(lines) + "\n")


def _kv(line: str) -> dict:
    return dict(item.split("=", 1) for item in line.lstrip("# ").split())


def read_profile(path) -> RadialProfile:
    text = Path(path).read_text().splitlines()
    mat, dom, en = _kv(text[0].replace("material", "")), _kv(text[1]), _kv(text[2])
    data = np.loadtxt(text[4:], ndmin=2)
    m = MaterialModel(float(mat["omega"]), float(mat["p"]), float(mat["g_scale"]))
    return RadialProfile(
        data[:, 0].copy(),
        data[:, 1].copy(),
        data[:, 2].copy(),
        float(en["energy"]),
        m,
        float(dom["eps0"]),
        float(dom["lambda"]),
    )
