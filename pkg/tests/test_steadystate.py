import numpy as np
import pytest

from cornerspace.lattice import build_geometry
from cornerspace.model import ModelParams, assemble_hamiltonian, build_base_cluster, jump_operators
from cornerspace.numerics import to_dense
from cornerspace.observables import evaluate
from cornerspace.steadystate import (DegenerateSteadyStateError, DensityMatrix, LindbladGenerator,
                                     SolverControls, evolve_to_steady_state, lindblad_rhs, liouvillian,
                                     steady_state_nullspace)

from conftest import random_density, random_hermitian

B = np.array([[0, 1], [0, 0]], dtype=complex)


def _single(params):
    c = build_base_cluster(build_geometry(1, 1), params)
    return c, to_dense(assemble_hamiltonian(c.ops, c.geometry, params)), [to_dense(j) for j in
                                                                          jump_operators(c.ops, params)]


def test_rhs_single_decay():
    rho = np.diag([0, 1]).astype(complex)
    out = lindblad_rhs(rho, np.zeros((2, 2)), [np.sqrt(0.7) * B])
    assert np.allclose(out, 0.7 * np.diag([1, -1]))


def test_rhs_vacuum_is_dark():
    assert np.allclose(lindblad_rhs(np.diag([1, 0]).astype(complex), np.zeros((2, 2)), [B]), 0)


def test_rhs_trace_and_hermiticity(rng):
    for d in (2, 5, 9):
        rho = random_density(rng, d)
        H = random_hermitian(rng, d)
        jumps = [rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)) for _ in range(3)]
        out = lindblad_rhs(rho, H, jumps)
        assert abs(np.trace(out)) < 1e-12 * max(1, np.abs(rho).max()) * 100
        assert np.abs(out - out.conj().T).max() < 1e-12 * max(1, np.abs(out).max())


def test_rhs_dimension_mismatch():
    with pytest.raises(ValueError):
        lindblad_rhs(np.eye(2) / 2, np.zeros((2, 2)), [np.zeros((3, 3))])


def test_generator_matches_liouvillian(rng):
    d = 4
    rho, H = random_density(rng, d), random_hermitian(rng, d)
    jumps = [rng.normal(size=(d, d)) + 0j for _ in range(2)]
    L = liouvillian(H, jumps)
    vec = L @ rho.reshape(-1, order="F")
    assert np.allclose(vec.reshape(d, d, order="F"), lindblad_rhs(rho, H, jumps))


def test_linear_cavity_closed_form():
    p = ModelParams(5, 0, 0, 2, N_max=10)
    c, H, jumps = _single(p)
    rho = steady_state_nullspace(H, jumps)
    b = to_dense(c.ops.b[0])
    assert abs(np.trace(rho.matrix @ to_dense(c.ops.n[0])).real - 0.15841584) < 1e-6
    assert abs(np.trace(rho.matrix @ b).real - 0.39603960) < 1e-6
    rep = evolve_to_steady_state(c, p, rho0=np.diag([1] + [0] * 10).astype(complex))
    assert rep.converged
    assert np.abs(rep.rho.matrix - rho.matrix).max() < 1e-6


def test_two_level_bloch_steady_state():
    p = ModelParams.hard_core(5, 0, 2)
    c, H, jumps = _single(p)
    rep = evolve_to_steady_state(c, p)
    assert abs(evaluate(c, rep.rho).n - 4 / 33.25) < 1e-6


def test_undriven_decays_to_vacuum():
    p = ModelParams(5, 20, 1, 0, N_max=2)
    c = build_base_cluster(build_geometry(2, 1, True, False), p)
    rho0 = np.zeros((9, 9), complex)
    rho0[8, 8] = 1
    rep = evolve_to_steady_state(c, p, rho0=rho0)
    assert rep.converged and evaluate(c, rep.rho).n < 1e-6


def test_nullspace_matches_evolution_2x1(hardcore):
    c = build_base_cluster(build_geometry(2, 1, True, False), hardcore)
    H = assemble_hamiltonian(c.ops, c.geometry, hardcore)
    rho = steady_state_nullspace(H, jump_operators(c.ops, hardcore))
    assert abs(np.trace(rho.matrix) - 1) < 1e-14
    rep = evolve_to_steady_state(c, hardcore)
    assert np.abs(rep.rho.matrix - rho.matrix).max() < 1e-6


def test_restart_at_fixed_point_converges_in_one_window(hardcore):
    c = build_base_cluster(build_geometry(2, 1, True, False), hardcore)
    first = evolve_to_steady_state(c, hardcore)
    again = evolve_to_steady_state(c, hardcore, rho0=first.rho)
    assert again.converged and again.elapsed <= SolverControls().check_window + 1e-9


def test_max_time_reported_not_fatal(hardcore):
    c = build_base_cluster(build_geometry(2, 1, True, False), hardcore)
    rep = evolve_to_steady_state(c, hardcore, controls=SolverControls(max_time=1.0, check_window=0.5))
    assert rep.reason == "max_time" and rep.rho is not None


def test_history_monotone_in_time(hardcore):
    c = build_base_cluster(build_geometry(2, 1, True, False), hardcore)
    rep = evolve_to_steady_state(c, hardcore)
    times = [t for t, _ in rep.history]
    assert all(b >= a for a, b in zip(times, times[1:]))


def test_degenerate_null_space_reported():
    # no dissipation: every eigenprojector of H is stationary
    with pytest.raises(DegenerateSteadyStateError):
        steady_state_nullspace(np.diag([0.0, 1.0]), [])


def test_nullspace_cap():
    with pytest.raises(ValueError):
        steady_state_nullspace(np.zeros((65, 65)), [np.eye(65)], cap=64)


def test_density_matrix_invariants():
    with pytest.raises(ValueError):
        DensityMatrix(np.eye(2))
    with pytest.raises(ValueError):
        DensityMatrix(np.array([[0.5, 1], [0, 0.5]]))
    assert np.allclose(DensityMatrix.pure([1, 1j]).matrix, [[0.5, -0.5j], [0.5j, 0.5]])


def test_block_generator_matches_dense(hardcore):
    from cornerspace.corner import jump_block_structure, merge_clusters, solve_cluster
    from cornerspace.lattice import plan_merge_schedule
    s = plan_merge_schedule(build_geometry(2, 2), build_geometry(2, 1, False, False))
    leaf = build_base_cluster(s.root.children[0].geometry, hardcore, tracked=s.root.children[0].tracked)
    solve_cluster(leaf, hardcore)
    cl = merge_clusters(leaf, leaf, s.root, 10)
    H = assemble_hamiltonian(cl.ops, cl.geometry, hardcore)
    J = jump_operators(cl.ops, hardcore)
    rho = random_density(np.random.default_rng(3), 10)
    dense = LindbladGenerator(H, J)(rho)
    blocked = LindbladGenerator(H, J, blocks=jump_block_structure(cl))(rho)
    assert np.abs(dense - blocked).max() < 1e-13
