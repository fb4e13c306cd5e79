import csv
import dataclasses
import math

import numpy as np
import pytest

from cavfem.analysis import error_norms
from cavfem.energy import EnergyAssembler, total_energy
from cavfem.fem import FEFunction, det2, interpolate, orientation_report
from cavfem.meshgen import MeshConfig, build_mesh, build_schedule, single_ring_mesh
from cavfem.solver import (
    InfeasibleGuessError,
    LineSearchError,
    MaxIterationsError,
    SolveSettings,
    SolverError,
    apply_dirichlet,
    initial_guess,
    minimize,
    oracle_field,
)


@pytest.fixture(scope="module")
def solved(material, profiles):
    mesh = build_mesh(build_schedule(MeshConfig(0.01, 0.06)))
    log = []
    res = minimize(mesh, material, SolveSettings(), profile=profiles[0.01], log=log.append)
    return mesh, res, log


def test_settings_validation():
    for bad in ({"gtol": 0.0}, {"contraction": 1.0}, {"contraction": 0.0}, {"det_floor": -1.0},
                {"initial_guess": "zero"}, {"max_iter": 0}):
        with pytest.raises(ValueError):
            SolveSettings(**bad)


def test_dirichlet_values(mesh_cache):
    mesh = mesh_cache(0.01, 0.06)
    mask, values = apply_dirichlet(mesh, 2.0)
    assert mask.sum() == 30
    R = np.hypot(*mesh.nodes[mask].T)
    assert np.allclose(R, 1.0, atol=1e-15)
    assert np.all(values[mask] == 2.0 * mesh.nodes[mask])
    ring = single_ring_mesh(0.5, 0.5, 8)
    rmask, rvals = apply_dirichlet(ring, 2.0)
    on_x_axis = np.flatnonzero(rmask & (ring.nodes[:, 0] == 1.0) & (ring.nodes[:, 1] == 0.0))
    assert len(on_x_axis) == 1 and tuple(rvals[on_x_axis[0]]) == (2.0, 0.0)
    # inner boundary is traction free
    assert not mask[mesh.inner_boundary].any()
    m1, v1 = apply_dirichlet(mesh, 1.0)
    assert np.array_equal(v1[m1], mesh.nodes[m1])


def test_dirichlet_needs_boundary(mesh_cache):
    mesh = mesh_cache(0.01, 0.06)
    with pytest.raises(ValueError):
        apply_dirichlet(dataclasses.replace(mesh, outer_boundary=mesh.outer_boundary[:0]), 2.0)


def test_initial_guess_policies(material, mesh_cache, profiles):
    mesh = mesh_cache(0.01, 0.06)
    f = initial_guess(mesh, "interpolated-oracle", profiles[0.01])
    assert orientation_report(f).positive
    g = initial_guess(mesh, "scaled-identity", lam=2.0)
    asm = EnergyAssembler(mesh, material)
    for cache in asm.quad:
        assert np.allclose(det2(cache.gradients(g.values)), 4.0, rtol=1e-12)
    with pytest.raises(ValueError):
        initial_guess(mesh, "interpolated-oracle", None)
    with pytest.raises(ValueError):
        initial_guess(mesh, "bogus")


def test_corrupted_mesh_guess_is_rejected(profiles):
    mesh = build_mesh(build_schedule(MeshConfig(1e-4, 0.06, C1=10.0)))
    with pytest.raises(InfeasibleGuessError) as info:
        initial_guess(mesh, "interpolated-oracle", profiles[1e-4])
    assert not info.value.report.positive
    assert len(info.value.report.failing) > 0


def test_solve_converges_below_interpolant_energy(solved, material, profiles):
    mesh, res, _ = solved
    E_pi = total_energy(interpolate(mesh, oracle_field(profiles[0.01])), material).total
    assert res.converged and res.orientation.positive
    assert res.energy.total <= E_pi
    assert res.grad_norm <= SolveSettings().gtol * (1 + abs(res.energy.total))
    # reported energy is the re-evaluated total energy
    assert res.energy.total == total_energy(res.u_h, material).total


def test_iterates_descend_and_stay_feasible(solved):
    _, res, log = solved
    E = [r.energy for r in res.history]
    assert all(b <= a for a, b in zip(E, E[1:]))
    assert all(r.min_det >= SolveSettings().det_floor for r in res.history)
    assert [r.iteration for r in res.history] == list(range(len(res.history)))
    assert log == res.history


def test_dirichlet_dofs_are_bitwise_exact(solved):
    mesh, res, _ = solved
    mask, bc = apply_dirichlet(mesh, 2.0)
    assert np.array_equal(res.u_h.values[mask], bc[mask])


def test_iterate_log_csv(solved, tmp_path):
    _, res, _ = solved
    res.write_log(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["iteration", "energy", "grad_norm", "step", "min_det"]
    assert len(rows) == len(res.history) + 1
    assert float(rows[-1][1]) == res.history[-1].energy


def test_unit_stretch_stays_at_low_energy(material):
    mesh = build_mesh(build_schedule(MeshConfig(0.01, 0.06)))
    settings = SolveSettings(lam=1.0, initial_guess="scaled-identity")
    E_id = total_energy(interpolate(mesh, lambda x: x), material).total
    res = minimize(mesh, material, settings)
    assert res.energy.total <= E_id
    assert res.orientation.positive and all(r.min_det >= settings.det_floor for r in res.history)


def test_huge_first_step_is_safeguarded(material, profiles):
    mesh = build_mesh(build_schedule(MeshConfig(0.01, 0.06)))
    settings = SolveSettings(first_step=1e6, max_iter=15, gtol=1e-14)
    try:
        res = minimize(mesh, material, settings, profile=profiles[0.01])
    except MaxIterationsError as exc:
        res = exc.result
    assert res is not None and len(res.history) > 1
    E = [r.energy for r in res.history]
    assert all(b <= a for a, b in zip(E, E[1:]))
    assert all(r.min_det >= settings.det_floor for r in res.history)
    assert max(r.step for r in res.history[1:]) <= 1e6


def test_max_iterations_error_carries_result(material, profiles):
    mesh = build_mesh(build_schedule(MeshConfig(0.01, 0.06)))
    with pytest.raises(MaxIterationsError) as info:
        minimize(mesh, material, SolveSettings(max_iter=2, gtol=1e-15), profile=profiles[0.01])
    assert isinstance(info.value, SolverError)
    assert info.value.result.iterations == 2 and not info.value.result.converged


def test_infeasible_start_is_rejected(material, mesh_cache):
    mesh = mesh_cache(0.01, 0.06)
    U = mesh.nodes.copy()
    U[:, 1] *= -1.0
    with pytest.raises(InfeasibleGuessError):
        minimize(mesh, material, SolveSettings(), start=FEFunction(mesh, U))


def test_explicit_start_gets_boundary_data(material, mesh_cache):
    mesh = mesh_cache(0.01, 0.06)
    res = minimize(mesh, material, SolveSettings(max_iter=3, gtol=1e-3), start=interpolate(mesh, lambda x: 2.0 * x))
    mask, bc = apply_dirichlet(mesh, 2.0)
    assert np.array_equal(res.u_h.values[mask], bc[mask])


def test_line_search_error_is_a_solver_error():
    assert issubclass(LineSearchError, SolverError) and issubclass(InfeasibleGuessError, SolverError)


def test_solution_errors_are_comparable_to_interpolant(solved, profiles):
    mesh, res, _ = solved
    prof = profiles[0.01]
    e_h = error_norms(res.u_h, prof)
    e_pi = error_norms(interpolate(mesh, oracle_field(prof)), prof)
    assert res.wall_s > 0
    # the discrete minimiser is close to the interpolant in both norms
    assert 0.2 < e_h.L2 / e_pi.L2 < 5 and 0.2 < e_h.W1p / e_pi.W1p < 5
    assert math.isfinite(e_h.L2)
