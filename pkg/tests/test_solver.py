import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.sparse.linalg import spsolve

from freebound.energy import first_variation, p_energy, regularized_energy, stiffness_matrix
from freebound.field import VectorField, sample
from freebound.mesh import Box, HalfBox, NodeClass, ProblemSpec, build_mesh, mesh_for
from freebound.solver import (
    InfeasibleError,
    SolverConfig,
    StepRule,
    check_feasible,
    descent_step,
    harmonic_extension,
    retract_free_boundary,
    solve,
    truncate_to_ball,
)


def const(c):
    return lambda x: np.tile(np.asarray(c, dtype=float), (len(x), 1))


def noisy_start(mesh, spec, rng, amp=0.5, around=None):
    """Feasible but far-from-optimal start: Dirichlet data, random elsewhere."""
    U = rng.normal(scale=amp, size=(mesh.num_nodes, spec.N)) + (0.3 if around is None else around)
    d = mesh.node_class == NodeClass.DIRICHLET
    U[d] = spec.dirichlet_values(mesh.vertices[d])
    return retract_free_boundary(VectorField(mesh, U))


# -- feasibility maps -------------------------------------------------------


def test_retraction_examples(half_square):
    m = half_square
    free = int(m.nodes_of_class(NodeClass.FREE_SPHERE)[0])
    inner = int(m.nodes_of_class(NodeClass.INTERIOR)[0])
    U = np.tile([0.6, 0.8], (m.num_nodes, 1))
    U[free] = [0.0, 2.0]
    U[inner] = [0.0, 2.0]
    out = retract_free_boundary(VectorField(m, U)).values
    assert np.allclose(out[free], [0.0, 1.0])
    assert np.allclose(out[inner], [0.0, 2.0])
    unit = VectorField(m, np.tile([0.6, 0.8], (m.num_nodes, 1)))
    assert np.array_equal(retract_free_boundary(unit).values, unit.values)
    U[free] = 0.0
    with pytest.raises(ValueError):
        retract_free_boundary(VectorField(m, U))


def test_truncation_examples(unit_square, rng):
    u = VectorField(unit_square, rng.uniform(-0.5, 0.5, size=(unit_square.num_nodes, 2)))
    assert np.array_equal(truncate_to_ball(u, 1.0).values, u.values)
    U = np.array(u.values)
    U[3] = [2.0, 0.0]
    assert np.allclose(truncate_to_ball(u.with_values(U), 1.0).values[3], [1.0, 0.0])
    with pytest.raises(ValueError):
        truncate_to_ball(u, 0.0)


@settings(max_examples=10, deadline=None)
@given(M=st.floats(0.3, 1.5), k=st.floats(1.0, 6.0), p=st.sampled_from([2.0, 3.0]))
def test_truncation_does_not_raise_energy(M, k, p):
    m = _fine_square()
    u = sample(m, lambda x: np.stack([np.cos(k * x[:, 0]) * (1 + x[:, 1]), np.sin(k * x[:, 1]) + x[:, 0]], axis=1))
    assert p_energy(truncate_to_ball(u, M), p).total <= p_energy(u, p).total * (1 + 10 * m.h)


_FINE = {}


def _fine_square():
    if "m" not in _FINE:
        _FINE["m"] = build_mesh(Box((0, 0), (1, 1)), 1 / 64)
    return _FINE["m"]


def test_check_feasible():
    spec = ProblemSpec(2, 2, 2, HalfBox((0, 0), (1, 1)), dirichlet_data=const([1.0, 0.0]))
    m = mesh_for(spec, 0.25)
    u = harmonic_extension(m, spec)
    check_feasible(u, spec)
    U = np.array(u.values)
    U[m.nodes_of_class(NodeClass.FREE_SPHERE)[0]] *= 1.1
    with pytest.raises(InfeasibleError):
        check_feasible(VectorField(m, U), spec)
    U = np.array(u.values)
    U[m.nodes_of_class(NodeClass.DIRICHLET)[0]] = [0.0, 1.0]
    with pytest.raises(InfeasibleError):
        check_feasible(VectorField(m, U), spec)


def test_harmonic_extension_needs_dirichlet_nodes():
    spec = ProblemSpec(2, 2, 2, HalfBox((0, 0), (1, 1)), free_boundary=("x1-", "x1+", "x2-", "x2+"), dirichlet_data=const([1.0, 0.0]))
    with pytest.raises(InfeasibleError):
        harmonic_extension(mesh_for(spec, 0.25), spec)


# -- configuration ------------------------------------------------------------


def test_config_validation_and_schedule():
    with pytest.raises(ValueError):
        SolverConfig(eps_decay=1.0)
    with pytest.raises(ValueError):
        SolverConfig(eps0=1e-3, eps_min=1e-2)
    with pytest.raises(ValueError):
        StepRule(direction="newton")
    with pytest.raises(ValueError):
        StepRule(line_search="wolfe")
    cfg = SolverConfig(eps0=1.0, eps_min=0.1, eps_decay=0.5)
    assert cfg.schedule(3.0, 7.0) == [1.0, 0.5, 0.25, 0.125, 0.1]
    assert cfg.schedule(2.0, 7.0) == [0.0]
    auto = SolverConfig().schedule(3.0, 2.0)
    assert auto[0] == 2.0 and auto[-1] == pytest.approx(2e-8)
    assert all(a > b for a, b in zip(auto, auto[1:]))


# -- descent step ---------------------------------------------------------------


def test_descent_step_at_critical_point(half_square):
    u = VectorField(half_square, np.tile([0.0, 1.0], (half_square.num_nodes, 1)))
    v, t = descent_step(u, 3.0, 0.1)
    assert t == 0.0 and np.array_equal(v.values, u.values)


@pytest.mark.parametrize("rule", [StepRule(), StepRule(line_search="armijo"), StepRule(direction="steepest")])
@pytest.mark.parametrize("p, eps", [(2.0, 0.0), (3.0, 0.05), (4.0, 1.0)])
def test_descent_step_decreases_energy(half_square, rng, rule, p, eps):
    spec = ProblemSpec(p, 2, 2, HalfBox((0, 0), (1, 1)), dirichlet_data=const([0.6, 0.8]))
    u = noisy_start(half_square, spec, rng)
    v, t = descent_step(u, p, eps, rule)
    assert t > 0
    assert regularized_energy(v, p, eps).total < regularized_energy(u, p, eps).total
    free = half_square.node_class == NodeClass.FREE_SPHERE
    assert np.allclose(v.norms()[free], 1.0)
    d = half_square.node_class == NodeClass.DIRICHLET
    assert np.array_equal(v.values[d], u.values[d])


def test_descent_step_rejects_eps_zero_for_p_above_two(half_square):
    u = VectorField(half_square, np.tile([0.0, 1.0], (half_square.num_nodes, 1)))
    with pytest.raises(ValueError):
        descent_step(u, 3.0, 0.0)


def test_exact_line_search_on_quadratic(unit_square, rng):
    m = unit_square
    U = np.zeros((m.num_nodes, 2))
    interior = ~m.boundary_nodes
    U[interior] = rng.normal(size=(interior.sum(), 2))
    u = VectorField(m, U)
    v, t = descent_step(u, 2.0, 0.0, StepRule(direction="steepest"))
    g = 2.0 * first_variation(u, 2.0, 0.0)  # gradient of E = Σ vol |∇u|²
    g[m.boundary_nodes] = 0.0
    K = stiffness_matrix(m)
    gKg = float(np.sum(g * (K @ g)))
    predicted = float(np.sum(g * g)) ** 2 / (4 * gKg)
    actual = p_energy(u, 2).total - p_energy(v, 2).total
    assert actual == pytest.approx(predicted, rel=1e-10)


# -- full solves ------------------------------------------------------------------


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_constant_data_gives_constant_solution(rng, p):
    c = np.array([0.6, -0.8])
    spec = ProblemSpec(p, 2, 2, HalfBox((0, 0), (1, 1)), dirichlet_data=const(c))
    m = mesh_for(spec, 1 / 8)
    # a start near c: large noise lets the free trace wind around the circle
    # between the Dirichlet corners, which pins a non-constant local minimizer
    u, rep = solve(m, spec, noisy_start(m, spec, rng, 0.2, c), SolverConfig(grad_tol=1e-10))
    assert rep.converged
    assert np.abs(u.values - c).max() < 1e-6
    assert p_energy(u, p).total < 1e-10
    assert all(b <= a for a, b in zip(rep.energy_trace, rep.energy_trace[1:]))
    assert all(d < 0 for d, t in zip(rep.decrease_trace, rep.step_trace) if t > 0)


def test_p2_affine_data_recovered(rng):
    spec = ProblemSpec(2, 2, 2, Box((0, 0), (1, 1)), dirichlet_data=lambda x: np.stack([x[:, 0], 0 * x[:, 0]], axis=1))
    m = mesh_for(spec, 1 / 16)
    u, rep = solve(m, spec, noisy_start(m, spec, rng), SolverConfig(grad_tol=1e-12))
    assert rep.converged
    exact = np.stack([m.vertices[:, 0], np.zeros(m.num_nodes)], axis=1)
    assert np.abs(u.values - exact).max() < 1e-8


def test_p2_matches_direct_solve(rng):
    data = lambda x: np.stack([x[:, 0] ** 2 - x[:, 1] ** 2 + x[:, 0] * x[:, 1] ** 3, np.sin(3 * x[:, 0]) * x[:, 1]], axis=1)
    spec = ProblemSpec(2, 2, 2, Box((0, 0), (1, 1)), dirichlet_data=data)
    m = mesh_for(spec, 1 / 32)
    u, rep = solve(m, spec, noisy_start(m, spec, rng), SolverConfig(grad_tol=1e-12))
    K = stiffness_matrix(m).tocsr()
    b = m.boundary_nodes
    inner = np.flatnonzero(~b)
    ref = data(m.vertices)
    ref[inner] = spsolve(K[inner][:, inner].tocsc(), -(K[inner][:, np.flatnonzero(b)] @ ref[b]))
    assert rep.converged
    assert np.abs(u.values - ref).max() < 1e-8


def test_solve_report_and_errors(half_square, rng):
    spec = ProblemSpec(3, 2, 2, HalfBox((0, 0), (1, 1)), dirichlet_data=const([1.0, 0.0]))
    init = noisy_start(half_square, spec, rng)
    u, rep = solve(half_square, spec, init, SolverConfig(max_iters=2))
    assert not rep.converged and rep.iterations == 2 and rep.message == "max_iters exceeded"
    assert rep.trace_csv().splitlines()[0] == "iter,eps,energy,residual_norm,step,decrease"
    assert len(rep.trace_csv().splitlines()) == len(rep.energy_trace) + 1
    assert set(rep.to_dict()) >= {"energy_trace", "converged", "final_residual_norm"}
    other = build_mesh(HalfBox((0, 0), (1, 1)), 0.125)
    with pytest.raises(ValueError):
        solve(other, spec, init)
    bad = init.with_values(init.values * 2)
    with pytest.raises(InfeasibleError):
        solve(half_square, spec, bad)
