"""Energy minimization for the truncated-data problems and their sequence.

The discrete energy is

    F(u) = sum_{i,j} w_ij |u_i - u_j|^p_ij / p_ij - sum_i m_i f_i u_i

over ordered pairs, so component k of its gradient is
2 sum_j w_kj |u_k - u_j|^(p_kj - 2) (u_k - u_j) - m_k f_k, the discrete weak
form. Boundary nodes are pinned to zero and excluded from optimality.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from fracplap import log
from fracplap.exponents import ExponentField
from fracplap.kernel import Kernel
from fracplap.mesh import DiscreteFunction
from fracplap.util import row_blocks

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 20000
SMOOTHING_STAGES = 6
SMOOTHING_RATIO = 4.0
LBFGS_MEMORY = 10
ARMIJO_C1 = 1e-4
# iterate past the acceptance threshold by this factor while progress is possible
POLISH_FACTOR = 1e-2

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class NegativeData(ValueError):
    def __init__(self, value: float, node: int) -> None:
        self.message = f"Data must be nonnegative, found f={value:.6g} at node {node}"
        super().__init__(self.message)


class MaxItersExceeded(RuntimeError):
    def __init__(self, iterations: int, residual: float, threshold: float) -> None:
        self.message = (
            f"Solver stopped after {iterations} iterations with weak residual "
            f"{residual:.3e} above {threshold:.3e}"
        )
        super().__init__(self.message)


class MonotonicityViolation(RuntimeError):
    def __init__(self, solutions: List["Solution"], level: float, margin: float) -> None:
        self.solutions = solutions
        self.level = level
        self.margin = margin
        self.message = (
            f"Approximation sequence lost monotonicity at level {level:g}: "
            f"min(u_next - u_prev) = {margin:.3e}"
        )
        super().__init__(self.message)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    smoothing_eps0: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ValueError(f"Solver tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {self.max_iters}")


@dataclass(frozen=True, eq=False)
class Problem:
    kernel: Kernel
    f: DiscreteFunction
    field: Optional[ExponentField] = None

    def __post_init__(self) -> None:
        self.kernel.check(self.f)
        negative = np.flatnonzero(self.f.values < 0)
        if negative.size:
            node = int(negative[0])
            raise NegativeData(float(self.f.values[node]), node)

    @property
    def boundary(self) -> np.ndarray:
        return self.kernel.boundary

    @property
    def interior(self) -> np.ndarray:
        return ~self.kernel.boundary

    @property
    def data_mass(self) -> np.ndarray:
        return self.kernel.masses * self.f.values

    @property
    def residual_scale(self) -> float:
        """1 + max_k m_k f_k; weak residuals are measured against this."""
        return 1.0 + float(np.max(self.data_mass, initial=0.0))

    def with_data(self, values: np.ndarray) -> "Problem":
        return Problem(kernel=self.kernel, f=self.f.with_values(values), field=self.field)

    def zeros(self) -> DiscreteFunction:
        return DiscreteFunction(np.zeros(self.kernel.size), self.kernel.mesh_id, True)


@dataclass(frozen=True, eq=False)
class Solution:
    u: DiscreteFunction
    level: Optional[float]
    weak_residual: float
    iterations: int
    energy_value: float
    smoothing_final: float
    converged: bool
    data: np.ndarray
    gradient: np.ndarray
    threshold: float
    monotonicity_margin: Optional[float] = None

    def ensure_converged(self) -> "Solution":
        if not self.converged:
            raise MaxItersExceeded(self.iterations, self.weak_residual, self.threshold)
        return self


def _objective(
    kernel: Kernel, data_mass: np.ndarray, values: np.ndarray, eps: float
) -> Tuple[float, np.ndarray]:
    gradient = np.empty(kernel.size)
    partials = []
    for rows in row_blocks(kernel.size):
        diff = values[rows, None] - values[None, :]
        w = kernel.weights[rows]
        p = kernel.exponents[rows]
        if eps > 0:
            base = diff * diff + eps * eps
            phi = (base ** (0.5 * p) - eps**p) / p
            dphi = diff * base ** (0.5 * p - 1.0)
        else:
            mag = np.abs(diff)
            phi = mag**p / p
            dphi = np.sign(diff) * mag ** (p - 1.0)
        partials.append(float(np.sum(w * phi)))
        gradient[rows] = 2.0 * np.sum(w * dphi, axis=1)
    value = float(np.sum(np.asarray(partials))) - float(np.dot(data_mass, values))
    return value, gradient - data_mass


def _check_boundary_zero(problem: Problem, u: DiscreteFunction) -> None:
    problem.kernel.check(u)
    if np.any(u.values[problem.boundary] != 0):
        raise ValueError("Function must vanish on boundary nodes")


def energy(problem: Problem, u: DiscreteFunction) -> float:
    _check_boundary_zero(problem, u)
    return _objective(problem.kernel, problem.data_mass, u.values, 0.0)[0]


def energy_gradient(problem: Problem, u: DiscreteFunction) -> DiscreteFunction:
    _check_boundary_zero(problem, u)
    gradient = _objective(problem.kernel, problem.data_mass, u.values, 0.0)[1]
    return DiscreteFunction(gradient, problem.kernel.mesh_id, False)


def weak_residual_vector(problem: Problem, u: DiscreteFunction) -> np.ndarray:
    """Gradient with boundary components zeroed."""
    r = np.array(energy_gradient(problem, u).values)
    r[problem.boundary] = 0.0
    return r


def _two_loop(
    g: np.ndarray, history: List[Tuple[np.ndarray, np.ndarray, float]]
) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * float(np.dot(s, q))
        alphas.append(a)
        q -= a * y
    if history:
        s, y, _ = history[-1]
        q *= float(np.dot(s, y)) / float(np.dot(y, y))
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * float(np.dot(y, q))
        q += (a - b) * s
    return q


@dataclass
class _StageResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    iterations: int
    stalled: bool
    energies: List[float]


def _lbfgs(
    fun: Objective,
    x: np.ndarray,
    tol: float,
    max_iters: int,
) -> _StageResult:
    """Limited-memory BFGS with Armijo backtracking; energies never increase."""
    value, g = fun(x)
    history: List[Tuple[np.ndarray, np.ndarray, float]] = []
    energies = [value]
    for iteration in range(1, max_iters + 1):
        if np.max(np.abs(g), initial=0.0) <= tol:
            return _StageResult(x, value, g, iteration - 1, False, energies)
        d = -_two_loop(g, history)
        slope = float(np.dot(g, d))
        if not slope < 0:
            history.clear()
            d = -g
            slope = float(np.dot(g, d))
        step = 1.0 if history else min(1.0, 1.0 / float(np.max(np.abs(g))))
        floor = 4.0 * np.finfo(float).eps * max(1.0, abs(value))
        while True:
            x_new = x + step * d
            value_new, g_new = fun(x_new)
            if value_new <= value + ARMIJO_C1 * step * slope:
                break
            # rounding-level ties count as progress only if the gradient shrinks
            if value_new <= value + floor and np.max(np.abs(g_new)) < np.max(
                np.abs(g)
            ):
                break
            step *= 0.5
            if step < 1e-20:
                if history:
                    history.clear()
                    break
                return _StageResult(x, value, g, iteration - 1, True, energies)
        if step < 1e-20:
            continue
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            history.append((s, y, 1.0 / sy))
            if len(history) > LBFGS_MEMORY:
                history.pop(0)
        logger.debug(
            "iteration %d: energy %.17g, |g| %.3e",
            iteration,
            value_new,
            float(np.max(np.abs(g_new))),
        )
        x, value, g = x_new, value_new, g_new
        energies.append(value)
    stalled = np.max(np.abs(g), initial=0.0) > tol
    return _StageResult(x, value, g, max_iters, stalled, energies)


def smoothing_schedule(problem: Problem, opts: SolverOptions) -> List[float]:
    if problem.kernel.p_minus >= 2:
        return [0.0]
    eps0 = opts.smoothing_eps0
    if eps0 is None:
        eps0 = 1e-2 * float(np.max(problem.f.values, initial=0.0))
    if eps0 <= 0:
        return [0.0]
    return [eps0 / SMOOTHING_RATIO**k for k in range(SMOOTHING_STAGES)] + [0.0]


def minimize(
    problem: Problem,
    u0: Optional[DiscreteFunction] = None,
    opts: Optional[SolverOptions] = None,
    level: Optional[float] = None,
) -> Solution:
    opts = opts or SolverOptions()
    u0 = u0 if u0 is not None else problem.zeros()
    _check_boundary_zero(problem, u0)

    kernel = problem.kernel
    interior = problem.interior
    data_mass = problem.data_mass
    threshold = opts.tol * problem.residual_scale

    def lift(x: np.ndarray) -> np.ndarray:
        full = np.zeros(kernel.size)
        full[interior] = x
        return full

    def stage_fun(eps: float) -> Objective:
        def fun(x: np.ndarray) -> Tuple[float, np.ndarray]:
            value, g = _objective(kernel, data_mass, lift(x), eps)
            return value, g[interior]

        return fun

    x = np.array(u0.values[interior])
    _, g0 = stage_fun(0.0)(x)
    iterations = 0
    schedule = [0.0]
    if np.max(np.abs(g0), initial=0.0) > threshold:
        schedule = smoothing_schedule(problem, opts)
        for eps in schedule:
            final = eps == 0.0
            stage_tol = threshold * POLISH_FACTOR if final else max(
                threshold, 1e-3 * eps * problem.residual_scale
            )
            result = _lbfgs(stage_fun(eps), x, stage_tol, opts.max_iters - iterations)
            x = result.x
            iterations += result.iterations
            logger.debug(
                "smoothing eps=%.3e: %d iterations, stalled=%s",
                eps,
                result.iterations,
                result.stalled,
            )
            if iterations >= opts.max_iters:
                break

    values = lift(x)
    value, g = _objective(kernel, data_mass, values, 0.0)
    g[problem.boundary] = 0.0
    residual = float(np.max(np.abs(g), initial=0.0))
    converged = residual <= threshold
    if not converged:
        log.warning(
            f"Solver did not reach weak residual {threshold:.3e} "
            f"(got {residual:.3e} after {iterations} iterations)"
        )
    return Solution(
        u=DiscreteFunction(values, kernel.mesh_id, True),
        level=level,
        weak_residual=residual,
        iterations=iterations,
        energy_value=value,
        smoothing_final=schedule[-1],
        converged=converged,
        data=np.array(problem.f.values),
        gradient=g,
        threshold=threshold,
    )


def approx_sequence(
    problem: Problem,
    levels: Sequence[float],
    opts: Optional[SolverOptions] = None,
) -> List[Solution]:
    """Solve with data T_n(f) for each level n, warm-starting upward."""
    opts = opts or SolverOptions()
    levels = [float(n) for n in levels]
    if not levels or any(n <= 0 for n in levels):
        raise ValueError("Truncation levels must be positive")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("Truncation levels must be strictly increasing")

    allowance = 10.0 * opts.tol
    solutions: List[Solution] = []
    violation: Optional[Tuple[float, float]] = None
    previous: Optional[Solution] = None
    for n in log.track(levels, "Solving truncated problems", len(levels)):
        level_problem = problem.with_data(np.minimum(problem.f.values, n))
        start = previous.u if previous is not None else None
        solution = minimize(level_problem, start, opts, level=n)

        margin = float(np.min(solution.u.values))
        if previous is not None:
            margin = min(margin, float(np.min(solution.u.values - previous.u.values)))
        solution = replace(solution, monotonicity_margin=margin)
        if margin < -allowance and violation is None:
            violation = (n, margin)
        solutions.append(solution)
        previous = solution

    if violation is not None:
        raise MonotonicityViolation(solutions, *violation)
    return solutions
