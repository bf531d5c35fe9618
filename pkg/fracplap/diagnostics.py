"""Discrete a priori estimates and identities, checked against solver output.

Every pairing check uses the same identity: for antisymmetric U and any test
function psi vanishing on the boundary,

    sum_{i,j} w_ij U_ij (psi_i - psi_j) = sum_i psi_i (r_i + m_i f_i)

where r is the weak residual (the energy gradient with boundary entries
zeroed). The slack allowed on each check is therefore the residual pairing
bound sup|psi| * sum|r|, plus a rounding allowance proportional to the
magnitudes summed.
"""

import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from fracplap.exponents import ExponentField
from fracplap.expression import Expression, coordinate_env
from fracplap.kernel import Kernel
from fracplap.mesh import DiscreteFunction, Mesh
from fracplap.reports import (
    CheckReport,
    DiscrepancyReport,
    LevelSetPoint,
    LevelSetSeries,
    SeriesPoint,
)
from fracplap.solver import Problem, Solution
from fracplap.spaces import (
    FunctionSpace,
    ModularKind,
    luxemburg_norm,
    seminorm_modular,
)
from fracplap.truncation import cutoff_derivative, cutoff_value, in_Rh, truncate
from fracplap.util import row_blocks

ROUNDOFF = 64 * float(np.finfo(float).eps)
J1_1_FLOOR = 1e-12


class UnsupportedTestFunction(ValueError):
    def __init__(self, nodes: int) -> None:
        self.message = (
            f"Test function is nonzero on {nodes} boundary or collar node(s); "
            "it must vanish within one cell of the boundary"
        )
        super().__init__(self.message)


class ZeroSeminorm(ValueError):
    def __init__(self) -> None:
        self.message = "Function has zero seminorm (it is constant on the mesh)"
        super().__init__(self.message)


class ExponentRangeViolation(ValueError):
    def __init__(self, low: float, high: float, node: int) -> None:
        self.message = (
            f"Lebesgue exponent r={low:.6g} at node {node} leaves the embedding "
            f"range (1, {high:.6g})"
        )
        super().__init__(self.message)


def _flux(kernel: Kernel, values: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """w_ij |u_i - u_j|^(p_ij - 2) (u_i - u_j) for the given rows."""
    diff = values[rows, None] - values[None, :]
    return (
        kernel.weights[rows]
        * np.sign(diff)
        * np.abs(diff) ** (kernel.exponents[rows] - 1.0)
    )


def _pairing(
    kernel: Kernel, values: np.ndarray, psi: np.ndarray
) -> Tuple[float, float]:
    """sum w U (psi_i - psi_j) and the sum of its absolute terms."""
    value = []
    magnitude = []
    for rows in row_blocks(kernel.size):
        terms = _flux(kernel, values, rows) * (psi[rows, None] - psi[None, :])
        value.append(float(np.sum(terms)))
        magnitude.append(float(np.sum(np.abs(terms))))
    return float(np.sum(value)), float(np.sum(magnitude))


def _residual_mass(sol: Solution) -> float:
    return float(np.sum(np.abs(sol.gradient)))


def _data_mass(problem: Problem, sol: Solution) -> np.ndarray:
    return problem.kernel.masses * sol.data


def _level(sol: Solution) -> Optional[float]:
    return math.inf if sol.level is None else sol.level


def residual_check(sol: Solution, problem: Problem, tol: float) -> CheckReport:
    """Measured weak residual against `tol * (1 + max m f)`."""
    scale = 1.0 + float(np.max(_data_mass(problem, sol), initial=0.0))
    return CheckReport.evaluate(
        "solver_residual", sol.weak_residual, tol * scale, 0.0, n=_level(sol), tol=tol
    )


def truncation_energy_check(sol: Solution, problem: Problem, k: float) -> CheckReport:
    kernel = problem.kernel
    kernel.check(sol.u)
    truncated = truncate(k, sol.u)
    lhs = seminorm_modular(kernel, truncated)
    rhs = k * float(np.sum(_data_mass(problem, sol)))
    _, magnitude = _pairing(kernel, sol.u.values, truncated.values)
    slack = k * _residual_mass(sol) + ROUNDOFF * (magnitude + rhs)
    return CheckReport.evaluate(
        "truncation_energy", lhs, rhs, slack, k=k, n=_level(sol)
    )


def rh_tail_check(sol: Solution, problem: Problem, h: float) -> CheckReport:
    kernel = problem.kernel
    kernel.check(sol.u)
    u = sol.u.values

    partials = []
    for rows in row_blocks(kernel.size):
        member = in_Rh(h, u[rows, None], u[None, :])
        diff = np.abs(u[rows, None] - u[None, :])
        tail = kernel.weights[rows] * diff ** (kernel.exponents[rows] - 1.0)
        partials.append(float(np.sum(np.where(member, tail, 0.0))))
    lhs = float(np.sum(partials))

    rhs = float(np.sum(_data_mass(problem, sol)[u > h]))
    psi = truncate(1.0, u - truncate(h, u))
    _, magnitude = _pairing(kernel, u, psi)
    slack = _residual_mass(sol) + ROUNDOFF * (magnitude + rhs)
    return CheckReport.evaluate("rh_tail", lhs, rhs, slack, h=h, n=_level(sol))


def _profile(sigma: float, values: np.ndarray, profile: str) -> np.ndarray:
    if profile == "value":
        return np.asarray(cutoff_value(sigma, values))
    if profile == "derivative":
        return np.asarray(cutoff_derivative(sigma, values))
    raise ValueError(f"Unknown cutoff profile '{profile}', expected value or derivative")


def _renormalized(
    sol: Solution,
    problem: Problem,
    sigma: float,
    phi: DiscreteFunction,
    profile: str,
) -> Tuple[float, np.ndarray, float]:
    kernel = problem.kernel
    kernel.check(sol.u)
    kernel.check(phi)
    outside = np.count_nonzero(phi.values[kernel.excluded_support])
    if outside:
        raise UnsupportedTestFunction(int(outside))
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    cut = _profile(sigma, sol.u.values, profile)
    psi = cut * phi.values
    pair, magnitude = _pairing(kernel, sol.u.values, psi)
    data = _data_mass(problem, sol) * psi
    residual = abs(pair - float(np.sum(data)))
    return residual, psi, magnitude + float(np.sum(np.abs(data)))


def renormalized_residual(
    sol: Solution,
    problem: Problem,
    sigma: float,
    phi: DiscreteFunction,
    profile: str = "value",
) -> float:
    """|sum w U ((S(u) phi)_i - (S(u) phi)_j) - sum m f S(u) phi|.

    `profile="value"` uses S = S_sigma, `profile="derivative"` the compactly
    supported S = S'_sigma.
    """
    return _renormalized(sol, problem, sigma, phi, profile)[0]


def renormalized_check(
    sol: Solution,
    problem: Problem,
    sigma: float,
    phi: DiscreteFunction,
    profile: str = "value",
    bump: Optional[int] = None,
) -> CheckReport:
    residual, psi, magnitude = _renormalized(sol, problem, sigma, phi, profile)
    slack = float(np.max(np.abs(psi), initial=0.0)) * _residual_mass(sol)
    return CheckReport.evaluate(
        f"renormalized_{profile}",
        residual,
        0.0,
        slack + ROUNDOFF * magnitude,
        sigma=sigma,
        bump=None if bump is None else float(bump),
        n=_level(sol),
    )


def uniqueness_discrepancy(
    u_sol: Solution,
    v_sol: Solution,
    problem: Problem,
    k: float,
    sigma: float,
) -> DiscrepancyReport:
    """The tested identity J1 + J2 = J3 with phi = T_k(S_sigma(u) - S_sigma(v))."""
    if not sigma >= k > 0:
        raise ValueError(f"Need sigma >= k > 0, got k={k}, sigma={sigma}")
    kernel = problem.kernel
    kernel.check(u_sol.u)
    kernel.check(v_sol.u)
    u = u_sol.u.values
    v = v_sol.u.values
    a_u = np.asarray(cutoff_derivative(sigma, u))
    a_v = np.asarray(cutoff_derivative(sigma, v))
    phi = truncate(k, np.asarray(cutoff_value(sigma, u)) - cutoff_value(sigma, v))
    gap = u - v
    small = (np.abs(u) <= k) & (np.abs(v) <= k) & (np.abs(gap) <= k)

    j1, j2, j11, magnitude = [], [], [], []
    for rows in row_blocks(kernel.size):
        big_u = _flux(kernel, u, rows)
        big_v = _flux(kernel, v, rows)
        dphi = phi[rows, None] - phi[None, :]
        t1 = (big_u * a_u[rows, None] - big_v * a_v[rows, None]) * dphi
        t2 = (
            big_u * (a_u[rows, None] - a_u[None, :])
            - big_v * (a_v[rows, None] - a_v[None, :])
        ) * phi[None, :]
        inner = small[rows, None] & small[None, :]
        t11 = np.where(inner, (big_u - big_v) * (gap[rows, None] - gap[None, :]), 0.0)
        j1.append(float(np.sum(t1)))
        j2.append(float(np.sum(t2)))
        j11.append(float(np.sum(t11)))
        magnitude.append(float(np.sum(np.abs(t1)) + np.sum(np.abs(t2))))

    masses = kernel.masses
    j3_terms = masses * (u_sol.data * a_u - v_sol.data * a_v) * phi
    bound = float(np.max(np.abs(a_u * phi), initial=0.0)) * _residual_mass(
        u_sol
    ) + float(np.max(np.abs(a_v * phi), initial=0.0)) * _residual_mass(v_sol)
    rounding = ROUNDOFF * (float(np.sum(magnitude)) + float(np.sum(np.abs(j3_terms))))
    return DiscrepancyReport(
        J1=float(np.sum(j1)),
        J2=float(np.sum(j2)),
        J3=float(np.sum(j3_terms)),
        J1_1=float(np.sum(j11)),
        k=k,
        sigma=sigma,
        pairing_bound=bound + rounding,
        max_gap=float(np.max(np.abs(gap), initial=0.0)),
    )


def uniqueness_checks(report: DiscrepancyReport, gap_tol: float) -> List[CheckReport]:
    context = {"k": report.k, "sigma": report.sigma}
    return [
        CheckReport.evaluate(
            "uniqueness_identity", report.discrepancy, 0.0, report.pairing_bound, **context
        ),
        CheckReport.evaluate(
            "uniqueness_monotone", -report.J1_1, 0.0, J1_1_FLOOR, **context
        ),
        CheckReport.evaluate(
            "uniqueness_gap", report.max_gap, 10.0 * gap_tol, 0.0, **context
        ),
    ]


def embedding_ratio(
    u: DiscreteFunction,
    kernel: Kernel,
    field: ExponentField,
    r: Union[Expression, np.ndarray, float],
) -> float:
    """Lebesgue-r Luxemburg norm of u over its seminorm."""
    kernel.check(u)
    if kernel.nodes is None:
        raise ValueError("Kernel carries no node coordinates")
    if isinstance(r, Expression):
        r_values = r.evaluate_many(coordinate_env(r, kernel.nodes))
    else:
        r_values = np.broadcast_to(np.asarray(r, dtype=float), (kernel.size,))
    p_bar = field.p_bar(kernel.nodes)
    n = kernel.dimension
    critical = n * p_bar / (n - field.s * p_bar)
    bad = np.flatnonzero((r_values <= 1) | (r_values >= critical))
    if bad.size:
        node = int(bad[0])
        raise ExponentRangeViolation(float(r_values[node]), float(critical[node]), node)

    seminorm = luxemburg_norm(ModularKind.seminorm, kernel, u)
    if seminorm == 0:
        raise ZeroSeminorm()
    space = FunctionSpace(kernel=kernel, q=np.array(r_values))
    return luxemburg_norm(ModularKind.lebesgue, space, u) / seminorm


def level_set_decay(
    sol: Solution,
    problem: Problem,
    ks: Sequence[float],
    space: FunctionSpace,
) -> LevelSetSeries:
    """Measures of {u >= k} next to the a priori bound C k^(1 - p_minus)."""
    ks = [float(k) for k in ks]
    if not ks or ks[0] <= 0 or any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("Levels k must be positive and increasing")
    kernel = problem.kernel
    u = sol.u.values
    measures = [float(np.sum(kernel.masses[u >= k])) for k in ks]

    embedding = 0.0
    for candidate in [truncate(k, sol.u) for k in ks] + [sol.u]:
        seminorm = luxemburg_norm(ModularKind.seminorm, kernel, candidate)
        if seminorm > 0:
            lebesgue = luxemburg_norm(ModularKind.lebesgue, space, candidate)
            embedding = max(embedding, lebesgue / seminorm)

    p_minus, p_plus = kernel.p_minus, kernel.p_plus
    total = float(np.sum(_data_mass(problem, sol))) + _residual_mass(sol)
    base = embedding * max(total ** (1 / p_minus), total ** (1 / p_plus))
    constant = max(base**p_minus, base**p_plus)
    points = [
        LevelSetPoint(k=k, measure=m, bound=constant * k ** (1 - p_minus))
        for k, m in zip(ks, measures)
    ]

    upper = [pt for pt in points[len(points) // 2 :] if pt.measure > 0]
    slope = None
    if len(upper) >= 2:
        slope = float(
            np.polyfit(
                np.log([pt.k for pt in upper]), np.log([pt.measure for pt in upper]), 1
            )[0]
        )
    return LevelSetSeries(
        points=points, constant=constant, embedding=embedding, slope=slope
    )


def level_set_checks(series: LevelSetSeries, headroom: float = 2.0) -> List[CheckReport]:
    return [
        CheckReport.evaluate(
            "level_set_decay", pt.measure, headroom * pt.bound, 0.0, k=pt.k
        )
        for pt in series.points
    ]


def truncation_convergence(
    seq: Sequence[Solution], kernel: Kernel, k: float
) -> List[SeriesPoint]:
    """Seminorm gap between T_k(u_n) and T_k of the last solution."""
    if not seq:
        return []
    last = truncate(k, seq[-1].u)
    points = []
    for sol in seq:
        diff = sol.u.with_values(truncate(k, sol.u).values - last.values)
        gap = luxemburg_norm(ModularKind.seminorm, kernel, diff)
        points.append(SeriesPoint(n=sol.level, gap=gap))
    return points


def interior_bumps(mesh: Mesh, count: int, seed: int) -> List[DiscreteFunction]:
    """Products of 1D tents centred at random nodes, zero on the collar."""
    rng = np.random.default_rng(seed)
    shape = np.asarray(mesh.shape)
    centres = np.flatnonzero(
        np.all((mesh.index >= 2) & (mesh.index <= shape - 3), axis=1)
    )
    if centres.size == 0 or count <= 0:
        return []
    bumps = []
    for centre in rng.choice(centres, size=count, replace=centres.size < count):
        c = mesh.index[centre]
        reach = np.minimum(c - 1, shape - 2 - c)
        radius = rng.integers(1, reach + 1)
        tents = np.clip(1.0 - np.abs(mesh.index - c) / radius, 0.0, None)
        values = np.prod(tents, axis=1)
        bumps.append(mesh.function(values / np.max(values), boundary_zero=True))
    return bumps
