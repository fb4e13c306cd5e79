"""Error norms against the radial reference, rate fits and convergence studies."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from cavfem.energy import MaterialModel, mesh_quadrature, total_energy
from cavfem.fem import FEFunction, MeshQuadrature, interpolate
from cavfem.meshgen import MeshConfig, build_mesh, build_schedule
from cavfem.quadrature import QuadratureRule
from cavfem.radial import RadialProfile, eval_r, eval_r_prime
from cavfem.solver import SolveSettings, SolverError, minimize, oracle_field

STUDY_COLUMNS = (
    "eps0",
    "h",
    "m",
    "min_tau",
    "max_tau",
    "N_inner",
    "N_outer",
    "N_d",
    "E_total",
    "E_rel_err",
    "L2_err",
    "W1p_err",
    "wall_ms",
)


@dataclass
class ErrorRecord:
    h: float
    eps0: float
    N_d: int
    L2: float
    W1p: float
    E_rel: float
    wall_ms: float = 0.0
    Lp: float = float("nan")
    sliver: float = 0.0  # measure of the annulus not covered by the mesh
    schedule: dict = field(default_factory=dict)
    E_total: float = float("nan")
    status: str = "ok"

    @property
    def W1p_full(self) -> float:
        return self.W1p + self.Lp


@dataclass
class ErrorNorms:
    L2: float
    W1p: float
    Lp: float
    sliver: float

    def __iter__(self):
        # unpacks as (L2, W1p)
        return iter((self.L2, self.W1p))


def exact_gradient(profile: RadialProfile, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``u`` and ``grad u = r' e_R e_R^T + (r/R) e_t e_t^T`` at points ``x``."""
    R = np.hypot(x[..., 0], x[..., 1])
    r, dr = eval_r(profile, R), eval_r_prime(profile, R)
    e = x / R[..., None]
    t = np.stack([-e[..., 1], e[..., 0]], axis=-1)
    u = (r / R)[..., None] * x
    G = dr[..., None, None] * np.einsum("...i,...j->...ij", e, e)
    G = G + (r / R)[..., None, None] * np.einsum("...i,...j->...ij", t, t)
    return u, G


def error_norms(
    u_h: FEFunction, profile: RadialProfile, q: QuadratureRule | MeshQuadrature | None = None, p: float | None = None
) -> ErrorNorms:
    """``||u - u_h||_{L2(Omega_h)}`` and ``|u - u_h|_{W1p(Omega_h)}`` by quadrature.

    The gradient norm is Frobenius; ``p`` defaults to the profile's material
    exponent.  ``q`` defaults to the graded mesh quadrature.  Per-element sums
    are combined with :func:`math.fsum`.
    """
    p = p if p is not None else profile.material.p
    l2, lp, w, dxs = [], [], [], []
    for cache in mesh_quadrature(u_h.mesh, q):
        u, G = exact_gradient(profile, cache.x)
        du = u - cache.values(u_h.values)
        dG = G - cache.gradients(u_h.values)
        dx = cache.dx
        l2.append(np.sum(np.sum(du * du, axis=-1) * dx, axis=1))
        lp.append(np.sum(np.sum(du * du, axis=-1) ** (p / 2) * dx, axis=1))
        w.append(np.sum(np.sum(dG * dG, axis=(-2, -1)) ** (p / 2) * dx, axis=1))
        dxs.append(dx.ravel())
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    sliver = math.pi * (1.0 - profile.eps0**2) - math.fsum(cat(dxs))
    return ErrorNorms(
        math.sqrt(math.fsum(cat(l2))), math.fsum(cat(w)) ** (1 / p), math.fsum(cat(lp)) ** (1 / p), sliver
    )


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float  # root-mean-square residual in log space


def rate_fit(pairs) -> RateFit:
    """Least-squares slope of ``log(err)`` against ``log(h)``."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError("rate_fit needs at least three (h, error) pairs")
    h = np.array([a for a, _ in pairs], dtype=float)
    e = np.array([b for _, b in pairs], dtype=float)
    if np.any(~(h > 0)) or np.any(~(e > 0)):
        raise ValueError("rate_fit needs positive h and error values")
    X = np.stack([np.log(h), np.ones_like(h)], axis=1)
    coef, *_ = np.linalg.lstsq(X, np.log(e), rcond=None)
    res = np.log(e) - X @ coef
    return RateFit(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res**2))))


def interpolation_energy_error(cfg: MeshConfig, profile: RadialProfile, m: MaterialModel) -> tuple[float, int]:
    """``|E(Pi u) - E(u)| / E(u)`` on the mesh built from ``cfg``; also returns N_d."""
    mesh = build_mesh(build_schedule(cfg))
    f = interpolate(mesh, oracle_field(profile))
    E = total_energy(f, m).total
    return abs(E - profile.energy) / abs(profile.energy), mesh.n_dofs


def run_case(
    cfg: MeshConfig,
    profile: RadialProfile,
    m: MaterialModel,
    settings: SolveSettings = SolveSettings(),
    solve: bool = True,
) -> ErrorRecord:
    """One (eps0, h) case: mesh, FE solve (or plain interpolant), errors."""
    t0 = time.perf_counter()
    sched = build_schedule(cfg)
    mesh = build_mesh(sched)
    status = "ok"
    if solve:
        try:
            u_h = minimize(mesh, m, settings, profile=profile).u_h
        except SolverError as exc:
            status = f"solve failed: {exc}"
            if exc.result is None:
                summ = sched.summary()
                nan = float("nan")
                return ErrorRecord(cfg.h, cfg.eps0, mesh.n_dofs, nan, nan, nan, 0.0, schedule=summ, status=status)
            u_h = exc.result.u_h
    else:
        u_h = interpolate(mesh, oracle_field(profile))
    E = total_energy(u_h, m).total
    err = error_norms(u_h, profile)
    wall = 1e3 * (time.perf_counter() - t0)
    return ErrorRecord(
        cfg.h,
        cfg.eps0,
        mesh.n_dofs,
        err.L2,
        err.W1p,
        abs(E - profile.energy) / abs(profile.energy),
        wall,
        err.Lp,
        err.sliver,
        sched.summary(),
        E,
        status,
    )


@dataclass
class StudyResult:
    records: list[ErrorRecord]
    slopes: dict[str, RateFit]

    def write_csv(self, path) -> None:
        write_study_csv(self.records, path)

    def write_slopes(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "slope", "residual"])
            for k, v in self.slopes.items():
                w.writerow([k, f"{v.slope:.6f}", f"{v.residual:.3e}"])


def _row(r: ErrorRecord) -> list[str]:
    s = r.schedule
    return [
        f"{r.eps0:g}",
        f"{r.h:g}",
        str(s.get("m", "")),
        f"{s.get('min_tau', float('nan')):.6g}",
        f"{s.get('max_tau', float('nan')):.6g}",
        str(s.get("N_inner", "")),
        str(s.get("N_outer", "")),
        str(r.N_d),
        f"{r.E_total:.12g}",
        f"{r.E_rel:.6e}",
        f"{r.L2:.6e}",
        f"{r.W1p:.6e}",
        f"{r.wall_ms:.0f}",
    ]


def write_study_csv(records, path, include_wall: bool = True) -> None:
    records = sorted(records, key=lambda r: (r.eps0, -r.h))
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STUDY_COLUMNS)
        for r in records:
            row = _row(r)
            if not include_wall:
                row[-1] = ""
            w.writerow(row)


def fit_study(records) -> dict[str, RateFit]:
    out = {}
    ok = [r for r in records if r.status == "ok"]
    for eps0 in sorted({r.eps0 for r in ok}):
        rs = [r for r in ok if r.eps0 == eps0]
        if len(rs) < 3:
            continue
        tag = f"eps0={eps0:g}"
        out[f"L2 {tag}"] = rate_fit([(r.h, r.L2) for r in rs])
        out[f"W1p {tag}"] = rate_fit([(r.h, r.W1p) for r in rs])
        out[f"E_rel {tag}"] = rate_fit([(r.h, r.E_rel) for r in rs])
        out[f"N_d vs 1/h {tag}"] = rate_fit([(1.0 / r.h, r.N_d) for r in rs])
    return out


def convergence_study(
    base: MeshConfig,
    hs,
    eps0s,
    profiles: dict[float, RadialProfile],
    m: MaterialModel,
    settings: SolveSettings = SolveSettings(),
    solve: bool = True,
    workers: int = 1,
) -> StudyResult:
    """Run every (eps0, h) case; failures are recorded and the study continues."""
    hs = list(hs)
    if not hs:
        raise ValueError("empty h list")
    if any(b >= a for a, b in zip(hs, hs[1:])):
        raise ValueError("h values must be strictly decreasing")
    cases = [(e, h) for e in sorted(eps0s) for h in hs]

    def one(case):
        e, h = case
        return run_case(replace(base, eps0=e, h=h), profiles[e], m, settings, solve)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            records = list(ex.map(one, cases))
    else:
        records = [one(c) for c in cases]
    return StudyResult(records, fit_study(records))
