import numpy as np
import pytest

from fracplap.diagnostics import (
    ExponentRangeViolation,
    UnsupportedTestFunction,
    ZeroSeminorm,
    embedding_ratio,
    interior_bumps,
    level_set_checks,
    level_set_decay,
    renormalized_check,
    renormalized_residual,
    residual_check,
    rh_tail_check,
    truncation_convergence,
    truncation_energy_check,
    uniqueness_checks,
    uniqueness_discrepancy,
)
from fracplap.exponents import build_exponent_field
from fracplap.expression import Role, parse_expression
from fracplap.kernel import assemble_kernel
from fracplap.mesh import build_mesh
from fracplap.solver import Solution, SolverOptions, approx_sequence, minimize
from fracplap.spaces import FunctionSpace, seminorm_modular
from tests.test_solver import UNIT, spike_problem

K_FRACTIONS = [0.1, 0.5, 1.0, 2.0]
H_FRACTIONS = [0.25, 0.5, 0.75, 0.9]
SIGMA_FRACTIONS = [0.5, 1.0, 2.0]


@pytest.fixture(scope="module")
def problem():
    return spike_problem()


@pytest.fixture(scope="module")
def sol(problem) -> Solution:
    solution = minimize(problem)
    assert solution.converged
    return solution


@pytest.fixture(scope="module")
def scale(sol) -> float:
    return float(np.max(sol.u.values))


@pytest.fixture(scope="module")
def zero_sol(problem) -> Solution:
    return minimize(problem.with_data(np.zeros(problem.kernel.size)))


def hat(mesh):
    x = mesh.nodes[:, 0]
    return mesh.pinned(np.clip(1.0 - np.abs(2.0 * x - 1.0), 0.0, None))


def test_residual_check(problem, sol) -> None:
    report = residual_check(sol, problem, SolverOptions().tol)
    assert report.passed
    assert report.lhs == sol.weak_residual
    assert not residual_check(sol, problem, 1e-20).passed


def test_truncation_energy_on_zero_data(problem, zero_sol) -> None:
    report = truncation_energy_check(zero_sol, problem, 1.0)
    assert report.lhs == 0.0
    assert report.rhs == 0.0
    assert report.passed


@pytest.mark.parametrize("fraction", K_FRACTIONS)
def test_truncation_energy_bound(problem, sol, scale, fraction) -> None:
    report = truncation_energy_check(sol, problem, fraction * scale)
    assert report.passed
    assert report.context["k"] == pytest.approx(fraction * scale)
    if fraction >= 1:
        assert report.lhs == pytest.approx(seminorm_modular(problem.kernel, sol.u))


def test_truncation_energy_has_margin_at_half_level(problem, sol, scale) -> None:
    report = truncation_energy_check(sol, problem, 0.5 * scale)
    assert report.lhs < report.rhs


@pytest.mark.parametrize("fraction", H_FRACTIONS)
def test_rh_tail_bound(problem, sol, scale, fraction) -> None:
    assert rh_tail_check(sol, problem, fraction * scale).passed


def test_rh_tail_vanishes_above_range(problem, sol, scale) -> None:
    report = rh_tail_check(sol, problem, scale)
    assert report.lhs == 0.0
    assert report.passed


def test_rh_tail_nonincreasing_near_top(problem, sol, scale) -> None:
    start = max(scale - 1.0, 1e-3 * scale)
    hs = np.linspace(start, scale + 1.0, 25)
    tails = [rh_tail_check(sol, problem, float(h)).lhs for h in hs]
    for a, b in zip(tails, tails[1:]):
        assert b <= a + 1e-12


def test_renormalized_checks_pass_on_bumps(problem, sol, scale) -> None:
    mesh = build_mesh(UNIT, 64)
    bumps = interior_bumps(mesh, 5, seed=0)
    assert len(bumps) == 5
    for index, phi in enumerate(bumps):
        for fraction in SIGMA_FRACTIONS:
            for profile in ("value", "derivative"):
                report = renormalized_check(
                    sol, problem, fraction * scale, phi, profile, bump=index
                )
                assert report.passed, report
                assert report.rhs == 0.0


def test_renormalized_residual_is_solver_residual_above_range(
    problem, sol, scale
) -> None:
    phi = interior_bumps(build_mesh(UNIT, 64), 1, seed=1)[0]
    residual = renormalized_residual(sol, problem, 2.0 * scale, phi)
    # S_sigma(u) = u when sigma >= max u
    bound = float(np.max(np.abs(sol.u.values * phi.values))) * float(
        np.sum(np.abs(sol.gradient))
    )
    assert residual <= bound + 1e-10


def test_renormalized_residual_of_zero_test_function(problem, sol) -> None:
    phi = build_mesh(UNIT, 64).zeros()
    assert renormalized_residual(sol, problem, 1.0, phi) == 0.0


def test_renormalized_rejects_collar_support(problem, sol) -> None:
    mesh = build_mesh(UNIT, 64)
    values = np.zeros(mesh.size)
    values[1] = 1.0
    with pytest.raises(UnsupportedTestFunction):
        renormalized_residual(sol, problem, 1.0, mesh.function(values))
    with pytest.raises(ValueError):
        renormalized_residual(sol, problem, 0.0, mesh.zeros())
    with pytest.raises(ValueError):
        renormalized_residual(sol, problem, 1.0, mesh.zeros(), profile="other")


def test_uniqueness_of_identical_solutions(problem, sol, scale) -> None:
    report = uniqueness_discrepancy(sol, sol, problem, 0.5 * scale, scale)
    assert report.J1 == report.J2 == report.J3 == report.J1_1 == 0.0
    assert report.max_gap == 0.0
    assert all(check.passed for check in uniqueness_checks(report, 1e-8))


def test_uniqueness_from_two_restarts(problem, scale) -> None:
    tol = SolverOptions().tol
    mesh = build_mesh(UNIT, 64)
    rng = np.random.default_rng(0)
    u, v = (
        minimize(problem, mesh.pinned(rng.uniform(0.0, scale, mesh.size)))
        for _ in range(2)
    )
    report = uniqueness_discrepancy(u, v, problem, 0.5 * scale, scale)
    assert report.discrepancy <= report.pairing_bound
    assert report.J1_1 >= -1e-12
    assert report.max_gap <= 10 * tol
    checks = uniqueness_checks(report, tol)
    assert [check.name for check in checks] == [
        "uniqueness_identity",
        "uniqueness_monotone",
        "uniqueness_gap",
    ]
    assert all(check.passed for check in checks)


def test_uniqueness_needs_sigma_at_least_k(problem, sol) -> None:
    with pytest.raises(ValueError):
        uniqueness_discrepancy(sol, sol, problem, 1.0, 0.5)
    with pytest.raises(ValueError):
        uniqueness_discrepancy(sol, sol, problem, 0.0, 0.5)


def test_level_set_decay(problem, sol, scale) -> None:
    space = FunctionSpace.of(problem.kernel, problem.field)
    ks = [scale * (j + 1) / 8 for j in range(8)]
    series = level_set_decay(sol, problem, ks, space)
    measures = [point.measure for point in series.points]
    assert all(b <= a for a, b in zip(measures, measures[1:]))
    assert measures[0] <= 1.0
    assert measures[-1] > 0
    assert series.constant > 0
    assert series.embedding > 0
    assert all(check.passed for check in level_set_checks(series))


def test_level_set_decay_edges(problem, sol, zero_sol, scale) -> None:
    space = FunctionSpace.of(problem.kernel, problem.field)
    above = level_set_decay(sol, problem, [2.0 * scale], space)
    assert above.points[0].measure == 0.0
    empty = level_set_decay(zero_sol, problem, [0.5, 1.0], space)
    assert empty.constant == 0.0
    assert all(check.passed for check in level_set_checks(empty))
    with pytest.raises(ValueError):
        level_set_decay(sol, problem, [1.0, 0.5], space)
    with pytest.raises(ValueError):
        level_set_decay(sol, problem, [0.0, 1.0], space)


def test_truncation_convergence_of_spike_sequence(problem) -> None:
    sequence = approx_sequence(problem, [1, 10, 100])
    k = 0.5 * float(np.max(sequence[-1].u.values))
    series = truncation_convergence(sequence, problem.kernel, k)
    assert [point.n for point in series] == [1.0, 10.0, 100.0]
    assert series[-1].gap == 0.0
    gaps = [point.gap for point in series]
    assert gaps[0] > 0
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


def test_truncation_convergence_of_bounded_data() -> None:
    small = spike_problem(16)
    bounded = small.with_data(np.ones(small.kernel.size))
    sequence = approx_sequence(bounded, [1, 2, 4])
    series = truncation_convergence(sequence, small.kernel, 1.0)
    assert len(series) == 3
    assert all(point.gap <= 10 * SolverOptions().tol for point in series)
    assert truncation_convergence([], small.kernel, 1.0) == []


def test_embedding_ratio_is_homogeneous(problem) -> None:
    mesh = build_mesh(UNIT, 64)
    u = hat(mesh)
    ratio = embedding_ratio(u, problem.kernel, problem.field, 2.0)
    assert np.isfinite(ratio) and ratio > 0
    scaled = mesh.pinned(3.0 * u.values)
    assert embedding_ratio(scaled, problem.kernel, problem.field, 2.0) == (
        pytest.approx(ratio, rel=1e-6)
    )
    r = parse_expression("2", 1, Role.pointwise)
    assert embedding_ratio(u, problem.kernel, problem.field, r) == pytest.approx(
        ratio, rel=1e-12
    )


def test_embedding_ratio_is_stable_under_refinement(problem) -> None:
    coarse = embedding_ratio(hat(build_mesh(UNIT, 64)), problem.kernel, problem.field, 2)
    mesh = build_mesh(UNIT, 128)
    field = build_exponent_field("2", None, 0.4, UNIT)
    fine = embedding_ratio(hat(mesh), assemble_kernel(mesh, field), field, 2)
    assert fine == pytest.approx(coarse, rel=0.1)


def test_embedding_ratio_errors(problem) -> None:
    mesh = build_mesh(UNIT, 64)
    with pytest.raises(ZeroSeminorm):
        embedding_ratio(mesh.function(np.ones(mesh.size)), problem.kernel, problem.field, 2)
    # critical exponent is N p / (N - s p) = 10 here
    for r in (0.5, 1.0, 12.0):
        with pytest.raises(ExponentRangeViolation):
            embedding_ratio(hat(mesh), problem.kernel, problem.field, r)


def test_interior_bumps() -> None:
    mesh = build_mesh(UNIT, 64)
    collar = mesh.collar()
    bumps = interior_bumps(mesh, 5, seed=4)
    assert len(bumps) == 5
    for phi in bumps:
        assert phi.boundary_zero
        assert np.all(phi.values[collar] == 0.0)
        assert np.max(phi.values) == 1.0
        assert np.min(phi.values) >= 0.0
    again = interior_bumps(mesh, 5, seed=4)
    for a, b in zip(bumps, again):
        np.testing.assert_array_equal(a.values, b.values)
    assert interior_bumps(build_mesh(UNIT, 4), 5, seed=0) == []
    assert interior_bumps(mesh, 0, seed=0) == []
