"""Command-line front end: ``cavfem <command> <config.ini>``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from cavfem.analysis import convergence_study, error_norms, write_study_csv
from cavfem.config import ConfigError, RunConfig, load_config, to_ini
from cavfem.energy import total_energy
from cavfem.fem import interpolate, orientation_report
from cavfem.meshgen import (
    InfeasibleConfigError,
    InvalidScheduleError,
    build_mesh,
    build_schedule,
    mesh_to_svg,
    write_mesh,
)
from cavfem.radial import RadialSolveError, solve_radial, write_profile
from cavfem.solver import InfeasibleGuessError, SolverError, minimize, oracle_field

log = logging.getLogger("cavfem")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _profile(cfg: RunConfig, eps0: float | None = None):
    e = cfg.mesh.eps0 if eps0 is None else eps0
    return solve_radial(cfg.material, e, cfg.problem.lam, cfg.problem.oracle_K, cache_dir=cfg.run.cache_dir or None)


def write_schedule_csv(schedule, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "eps", "tau", "N", "k", "conforming"])
        for i, L in enumerate(schedule.layers):
            w.writerow([i, f"{L.eps:.17g}", f"{L.tau:.17g}", L.N, L.k, int(L.conforming)])


def cmd_mesh(cfg: RunConfig) -> int:
    sched = build_schedule(cfg.mesh)
    mesh = build_mesh(sched)
    out = _out(cfg)
    write_mesh(mesh, out / "mesh.txt")
    mesh_to_svg(mesh, out / "mesh.svg")
    write_schedule_csv(sched, out / "schedule.csv")
    s = sched.summary()
    print(
        f"m={s['m']} min_tau={s['min_tau']:.4f} max_tau={s['max_tau']:.4f} "
        f"N={s['N_inner']}/{s['N_outer']} nodes={mesh.n_nodes} elements={mesh.n_elements}"
    )
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    prof = _profile(cfg)
    out = _out(cfg)
    write_profile(prof, out / "profile.txt")
    print(f"E={prof.energy:.15g} r(eps0)={prof.r[0]:.12g} m={prof.m_lower:.6g} M={prof.M_upper:.6g}")
    return EXIT_OK


def cmd_interp(cfg: RunConfig) -> int:
    mesh = build_mesh(build_schedule(cfg.mesh))
    prof = _profile(cfg)
    f = interpolate(mesh, oracle_field(prof))
    rep = orientation_report(f)
    E = total_energy(f, cfg.material)
    err = error_norms(f, prof)
    out = _out(cfg)
    rep.write_csv(out / "orientation.csv")
    E.write_csv(out / "energy.csv")
    rel = abs(E.total - prof.energy) / abs(prof.energy)
    print(
        f"orientation={'positive' if rep.positive else 'FAILED'} min_det_bound={rep.min_bound:.6g} "
        f"E_rel_err={rel:.6e} L2={err.L2:.6e} W1p={err.W1p:.6e}"
    )
    return EXIT_OK if rep.positive else EXIT_RUNTIME


def write_solution(u_h, path) -> None:
    X, U = u_h.mesh.nodes, u_h.values
    with open(path, "w") as fh:
        fh.write("# x y u1 u2\n")
        for (a, b), (c, d) in zip(X, U):
            fh.write(f"{a:.17g} {b:.17g} {c:.17g} {d:.17g}\n")


def cmd_solve(cfg: RunConfig) -> int:
    mcfg = cfg.mesh
    prof = _profile(cfg) if cfg.solver.initial_guess == "interpolated-oracle" else None
    retries = 0
    while True:
        mesh = build_mesh(build_schedule(mcfg))
        try:
            res = minimize(mesh, cfg.material, cfg.settings(), profile=prof)
            break
        except InfeasibleGuessError as exc:
            if not cfg.run.retry_halve_c1 or retries >= cfg.run.max_retries:
                raise
            retries += 1
            mcfg = dataclasses.replace(mcfg, C1=mcfg.C1 / 2)
            log.warning("retry %d: %s; halving C1 to %g", retries, exc, mcfg.C1)
            print(f"retry {retries}: orientation failed, C1 -> {mcfg.C1:g}")
    out = _out(cfg)
    write_solution(res.u_h, out / "solution.txt")
    res.write_log(out / "iterate_log.csv")
    res.orientation.write_csv(out / "orientation.csv")
    res.energy.write_csv(out / "energy.csv")
    print(
        f"iterations={res.iterations} grad_norm={res.grad_norm:.3e} E={res.energy.total:.15g} "
        f"orientation={'positive' if res.orientation.positive else 'FAILED'} C1={mcfg.C1:g}"
    )
    return EXIT_OK if res.orientation.positive else EXIT_RUNTIME


def cmd_study(cfg: RunConfig) -> int:
    st = cfg.study
    profiles = {e: _profile(cfg, e) for e in st.eps0s}
    res = convergence_study(
        cfg.mesh, st.hs, st.eps0s, profiles, cfg.material, cfg.settings(), solve=st.solve, workers=st.workers
    )
    out = _out(cfg)
    write_study_csv(res.records, out / "study.csv", include_wall=st.timing)
    res.write_slopes(out / "slopes.csv")
    # plot-ready (x, y) pairs
    for q in ("L2", "W1p", "E_rel"):
        with open(out / f"plot_{q}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps0", "h", q])
            for r in sorted(res.records, key=lambda r: (r.eps0, -r.h)):
                w.writerow([f"{r.eps0:g}", f"{r.h:g}", f"{getattr(r, q):.6e}"])
    with open(out / "plot_N_d.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps0", "inv_h", "N_d"])
        for r in sorted(res.records, key=lambda r: (r.eps0, -r.h)):
            w.writerow([f"{r.eps0:g}", f"{1 / r.h:g}", r.N_d])
    for k, v in res.slopes.items():
        print(f"{k}: slope {v.slope:.3f} (residual {v.residual:.2e})")
    failed = [r for r in res.records if r.status != "ok"]
    for r in failed:
        print(f"eps0={r.eps0:g} h={r.h:g}: {r.status}")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_render(cfg: RunConfig) -> int:
    mesh = build_mesh(build_schedule(cfg.mesh))
    out = _out(cfg)
    mesh_to_svg(mesh, out / "mesh.svg")
    sol = out / "solution.txt"
    if sol.exists():
        data = np.loadtxt(sol, ndmin=2)
        if data.shape[0] == mesh.n_nodes:
            deformed = dataclasses.replace(mesh, nodes=data[:, 2:4])
            mesh_to_svg(deformed, out / "deformed.svg")
            print(f"wrote {out / 'mesh.svg'} and {out / 'deformed.svg'}")
            return EXIT_OK
    print(f"wrote {out / 'mesh.svg'}")
    return EXIT_OK


COMMANDS = {
    "mesh": cmd_mesh,
    "oracle": cmd_oracle,
    "interp": cmd_interp,
    "solve": cmd_solve,
    "study": cmd_study,
    "render": cmd_render,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cavfem", description="Quadratic iso-parametric FEM for 2-D cavitation.")
    ap.add_argument("command", choices=[*COMMANDS, "config"], help="'config' prints the resolved configuration")
    ap.add_argument("config", help="path to an INI configuration file")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "config":
            print(to_ini(cfg), end="")
            return EXIT_OK
        cfg.mesh.validate()
        return COMMANDS[args.command](cfg)
    except (ConfigError, InfeasibleConfigError, InvalidScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, RadialSolveError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
