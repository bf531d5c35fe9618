import functools
from dataclasses import replace

import numpy as np
import pytest

from fracplap import solver
from fracplap.exponents import build_exponent_field
from fracplap.kernel import Kernel, assemble_kernel
from fracplap.mesh import DiscreteFunction, Domain, MeshMismatch, build_mesh
from fracplap.solver import (
    MaxItersExceeded,
    MonotonicityViolation,
    NegativeData,
    Problem,
    SolverOptions,
    approx_sequence,
    energy,
    energy_gradient,
    minimize,
    smoothing_schedule,
    weak_residual_vector,
)

UNIT = Domain.from_extent([[0.0, 1.0]])


@functools.lru_cache(maxsize=None)
def spike_problem(cells: int = 64, s: float = 0.4, p: str = "2") -> Problem:
    """Unit-mass spike at the middle node of [0, 1]."""
    mesh = build_mesh(UNIT, cells)
    field = build_exponent_field(p, None, s, UNIT)
    kernel = assemble_kernel(mesh, field)
    values = np.zeros(mesh.size)
    centre = mesh.nearest_node([0.5])
    values[centre] = 1.0 / mesh.masses[centre]
    return Problem(kernel=kernel, f=mesh.function(values), field=field)


def fn(kernel: Kernel, values) -> DiscreteFunction:
    return DiscreteFunction(np.asarray(values, dtype=float), kernel.mesh_id, True)


def two_node_problem(f) -> Problem:
    kernel = Kernel.explicit([[0, 1], [1, 0]], [[0, 2], [2, 0]], [1, 1])
    return Problem(kernel=kernel, f=fn(kernel, f))


def path_problem(p: float) -> Problem:
    kernel = Kernel.explicit(
        [[0, 1, 0], [1, 0, 1], [0, 1, 0]],
        [[0, p, p], [p, 0, p], [p, p, 0]],
        [1, 1, 1],
        boundary=[True, False, True],
    )
    return Problem(kernel=kernel, f=fn(kernel, [0.0, 1.0, 0.0]))


def test_energy_examples() -> None:
    problem = two_node_problem([0.0, 0.0])
    assert energy(problem, fn(problem.kernel, [0.0, 0.0])) == 0.0
    assert energy(problem, fn(problem.kernel, [0.0, 1.0])) == 1.0
    loaded = two_node_problem([1.0, 1.0])
    assert energy(loaded, fn(loaded.kernel, [0.0, 1.0])) == 0.0


def test_gradient_examples() -> None:
    problem = two_node_problem([1.0, 1.0])
    gradient = energy_gradient(problem, fn(problem.kernel, [0.0, 1.0]))
    np.testing.assert_array_equal(gradient.values, [-3.0, 1.0])
    assert not gradient.boundary_zero

    at_zero = energy_gradient(problem, fn(problem.kernel, [0.0, 0.0]))
    np.testing.assert_array_equal(at_zero.values, [-1.0, -1.0])


def test_weak_residual_drops_boundary_components() -> None:
    problem = path_problem(2.0)
    r = weak_residual_vector(problem, fn(problem.kernel, [0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(r, [0.0, -1.0, 0.0])


def test_energy_rejects_nonzero_boundary_and_foreign_mesh() -> None:
    problem = path_problem(2.0)
    with pytest.raises(ValueError):
        energy(problem, fn(problem.kernel, [1.0, 0.0, 0.0]))
    with pytest.raises(MeshMismatch):
        energy(problem, DiscreteFunction(np.zeros(3), "other", True))


def test_gradient_matches_finite_differences() -> None:
    problem = spike_problem(32, 0.3, "2 + 0.5*sin(pi*(x+y))")
    assert problem.kernel.p_minus < 2 < problem.kernel.p_plus
    rng = np.random.default_rng(11)
    interior = problem.interior

    def pinned(values: np.ndarray) -> DiscreteFunction:
        return fn(problem.kernel, np.where(interior, values, 0.0))

    u = pinned(rng.normal(size=problem.kernel.size))
    g = energy_gradient(problem, u).values
    step = 1e-6
    for _ in range(100):
        v = pinned(rng.normal(size=problem.kernel.size)).values
        forward = energy(problem, pinned(u.values + step * v))
        backward = energy(problem, pinned(u.values - step * v))
        numeric = (forward - backward) / (2 * step)
        exact = float(np.dot(g, v))
        assert abs(numeric - exact) <= 1e-6 * max(1.0, abs(exact))


@pytest.mark.parametrize(
    "p,expected",
    [(2.0, 0.25), (4.0, 0.25 ** (1 / 3)), (1.5, 1 / 16)],
)
def test_path_kernel_closed_form(p: float, expected: float) -> None:
    sol = minimize(path_problem(p))
    assert sol.converged
    assert sol.u.boundary_zero
    assert sol.u.values[0] == sol.u.values[2] == 0.0
    assert sol.u.values[1] == pytest.approx(expected, abs=1e-7)
    assert sol.weak_residual <= sol.threshold


def test_path_kernel_p4_value() -> None:
    sol = minimize(path_problem(4.0))
    assert sol.u.values[1] == pytest.approx(0.629961, abs=1e-6)


def test_zero_data_gives_zero_solution() -> None:
    problem = spike_problem(16)
    zero = problem.with_data(np.zeros(problem.kernel.size))
    sol = minimize(zero)
    np.testing.assert_array_equal(sol.u.values, 0.0)
    assert sol.weak_residual == 0.0
    assert sol.iterations == 0
    assert sol.converged


def test_minimize_is_deterministic() -> None:
    problem = spike_problem(16)
    first = minimize(problem)
    second = minimize(problem)
    np.testing.assert_array_equal(first.u.values, second.u.values)
    assert first.iterations == second.iterations


def test_minimizer_lowers_energy() -> None:
    problem = spike_problem(32)
    sol = minimize(problem)
    assert sol.converged
    assert sol.energy_value < 0.0
    assert sol.energy_value == pytest.approx(energy(problem, sol.u), abs=1e-12)
    assert np.min(sol.u.values) >= -1e-10


def test_energies_never_increase_within_a_smoothing_stage(mocker) -> None:
    problem = spike_problem(32, 0.4, "1.5")
    stages = mocker.spy(solver, "_lbfgs")
    sol = minimize(problem)
    assert sol.converged
    assert np.min(sol.u.values) >= -1e-10
    schedule = smoothing_schedule(problem, SolverOptions())
    assert stages.call_count == len(schedule)
    assert stages.call_count > 1
    rounding = 4.0 * np.finfo(float).eps
    for result in stages.spy_return_list:
        for before, after in zip(result.energies, result.energies[1:]):
            assert after <= before + rounding * max(1.0, abs(before))


def test_unique_minimizer_from_random_starts() -> None:
    problem = spike_problem(32)
    opts = SolverOptions()
    rng = np.random.default_rng(3)
    solutions = []
    for _ in range(2):
        start = np.where(problem.interior, rng.uniform(0, 1, problem.kernel.size), 0)
        solutions.append(minimize(problem, fn(problem.kernel, start), opts))
    assert all(sol.converged for sol in solutions)
    gap = np.max(np.abs(solutions[0].u.values - solutions[1].u.values))
    assert gap <= 10 * opts.tol


def test_comparison_principle() -> None:
    problem = spike_problem(32)
    larger = problem.with_data(problem.f.values + 0.5)
    u_f = minimize(problem).u.values
    u_g = minimize(larger).u.values
    assert np.all(u_f <= u_g + 10 * SolverOptions().tol)


def test_negative_data() -> None:
    kernel = path_problem(2.0).kernel
    with pytest.raises(NegativeData) as excinfo:
        Problem(kernel=kernel, f=fn(kernel, [0.0, -1.0, 0.0]))
    assert "node 1" in excinfo.value.message


def test_max_iters_exceeded() -> None:
    sol = minimize(spike_problem(32), opts=SolverOptions(max_iters=1))
    assert not sol.converged
    assert sol.iterations == 1
    with pytest.raises(MaxItersExceeded):
        sol.ensure_converged()


def test_solver_options_validation() -> None:
    with pytest.raises(ValueError):
        SolverOptions(tol=0.0)
    with pytest.raises(ValueError):
        SolverOptions(max_iters=0)


def test_smoothing_schedule() -> None:
    assert smoothing_schedule(path_problem(2.0), SolverOptions()) == [0.0]
    schedule = smoothing_schedule(path_problem(1.5), SolverOptions())
    assert schedule[0] == pytest.approx(1e-2)
    assert schedule[-1] == 0.0
    assert all(b == pytest.approx(a / 4) for a, b in zip(schedule, schedule[1:-1]))
    custom = smoothing_schedule(path_problem(1.5), SolverOptions(smoothing_eps0=0.5))
    assert custom[0] == 0.5


def test_sequence_of_bounded_data_saturates() -> None:
    problem = spike_problem(16)
    bounded = problem.with_data(np.full(problem.kernel.size, 5.0))
    solutions = approx_sequence(bounded, [1, 2, 5, 10])
    assert [sol.level for sol in solutions] == [1.0, 2.0, 5.0, 10.0]
    np.testing.assert_array_equal(solutions[0].data, 1.0)
    np.testing.assert_array_equal(solutions[3].data, 5.0)
    gap = np.max(np.abs(solutions[2].u.values - solutions[3].u.values))
    assert gap <= 10 * SolverOptions().tol


def test_sequence_of_zero_data() -> None:
    problem = spike_problem(16)
    zero = problem.with_data(np.zeros(problem.kernel.size))
    for sol in approx_sequence(zero, [1, 10]):
        np.testing.assert_array_equal(sol.u.values, 0.0)


def test_spike_sequence_is_monotone() -> None:
    tol = SolverOptions().tol
    solutions = approx_sequence(spike_problem(), [1, 10, 100])
    assert all(sol.converged for sol in solutions)
    for previous, current in zip(solutions, solutions[1:]):
        assert np.min(current.u.values - previous.u.values) >= -10 * tol
    assert all(sol.monotonicity_margin >= -10 * tol for sol in solutions)
    assert np.max(solutions[-1].u.values) > np.max(solutions[0].u.values)


@pytest.mark.parametrize("levels", [[], [0, 1], [2, 1], [1, 1]])
def test_sequence_rejects_bad_levels(levels) -> None:
    with pytest.raises(ValueError):
        approx_sequence(spike_problem(16), levels)


def test_sequence_reports_violation_after_solving_all_levels(mocker) -> None:
    real = solver.minimize

    def shrinking(problem, u0=None, opts=None, level=None):
        sol = real(problem, u0, opts, level)
        if level == 10:
            return replace(sol, u=sol.u.with_values(sol.u.values * 0.01))
        return sol

    patched = mocker.patch("fracplap.solver.minimize", side_effect=shrinking)
    with pytest.raises(MonotonicityViolation) as excinfo:
        approx_sequence(spike_problem(16), [1, 10, 100])
    assert patched.call_count == 3
    assert excinfo.value.level == 10.0
    assert excinfo.value.margin < 0
    assert len(excinfo.value.solutions) == 3
