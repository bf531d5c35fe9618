"""Batch pipelines behind the command-line front door.

Each `run_*` function loads a config, builds the problem, writes its output
files and returns the process exit code.
"""

import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional, Tuple, Type

import numpy as np
from rich import box
from rich.table import Table

from fracplap import log
from fracplap.config import ConfigError, RunConfig, load_config
from fracplap.diagnostics import (
    ExponentRangeViolation,
    UnsupportedTestFunction,
    ZeroSeminorm,
    embedding_ratio,
    interior_bumps,
    level_set_checks,
    level_set_decay,
    renormalized_check,
    residual_check,
    rh_tail_check,
    truncation_convergence,
    truncation_energy_check,
    uniqueness_checks,
    uniqueness_discrepancy,
)
from fracplap.exponents import (
    AsymmetricExponent,
    ExponentField,
    ExponentOutOfRange,
    OrderTooLarge,
    build_exponent_field,
)
from fracplap.expression import (
    DomainError,
    ExpressionSyntaxError,
    Role,
    UnknownVariable,
    coordinate_env,
    parse_expression,
)
from fracplap.fmt import efmt, ffmt, ifmt, mfmt, passfail
from fracplap.kernel import (
    BudgetExceeded,
    DisconnectedKernel,
    Kernel,
    KernelFormatError,
    assemble_kernel,
)
from fracplap.mesh import Domain, Mesh, MeshMismatch, build_mesh
from fracplap.reports import (
    CheckReport,
    ChecksDocument,
    MetaDocument,
    SeriesPoint,
    SolutionDocument,
    finite_or_none,
    write_csv,
    write_json,
)
from fracplap.solver import (
    MaxItersExceeded,
    MonotonicityViolation,
    NegativeData,
    Problem,
    Solution,
    SolverOptions,
    approx_sequence,
    minimize,
)
from fracplap.spaces import (
    FunctionSpace,
    ModularKind,
    NonConvergence,
    luxemburg_norm_result,
)
from fracplap.util import atomic_write

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_KERNEL = 4
EXIT_MONOTONICITY = 5
EXIT_CHECK_FAILED = 6

EXIT_CODES: List[Tuple[Tuple[Type[BaseException], ...], int]] = [
    (
        (
            ConfigError,
            ExpressionSyntaxError,
            UnknownVariable,
            DomainError,
            AsymmetricExponent,
            ExponentOutOfRange,
            OrderTooLarge,
            NegativeData,
            ExponentRangeViolation,
            UnsupportedTestFunction,
            MeshMismatch,
        ),
        EXIT_CONFIG,
    ),
    ((MaxItersExceeded, NonConvergence), EXIT_SOLVER),
    ((BudgetExceeded, DisconnectedKernel, KernelFormatError), EXIT_KERNEL),
    ((MonotonicityViolation,), EXIT_MONOTONICITY),
]


def exit_code_for(exc: BaseException) -> Optional[int]:
    for kinds, code in EXIT_CODES:
        if isinstance(exc, kinds):
            return code
    return None


def guarded(run: Callable[[], int]) -> int:
    """Run a pipeline, mapping the known failures onto exit codes."""
    try:
        return run()
    except Exception as exc:
        code = exit_code_for(exc)
        if code is None:
            raise
        logger.debug("pipeline failed", exc_info=True)
        message = getattr(exc, "message", str(exc))
    log.error(message)
    return code


@dataclass(frozen=True, eq=False)
class Workspace:
    config: RunConfig
    mesh: Mesh
    field: ExponentField
    kernel: Kernel
    problem: Problem

    @property
    def options(self) -> SolverOptions:
        solver = self.config.solver
        return SolverOptions(
            tol=solver.tol,
            max_iters=solver.max_iters,
            smoothing_eps0=solver.smoothing_eps0,
        )


def sample_data(config: RunConfig, mesh: Mesh) -> np.ndarray:
    """f on the nodes, plus a unit-mass spike when one is configured."""
    expr = parse_expression(config.problem.f_expr, mesh.dimension, Role.pointwise)
    values = np.array(expr.evaluate_many(coordinate_env(expr, mesh.nodes)))
    if config.problem.f_spike is not None:
        interior = np.flatnonzero(mesh.interior)
        if interior.size == 0:
            raise ConfigError("problem.f_spike", "mesh has no interior node")
        point = np.asarray(config.problem.f_spike, dtype=float)
        nearest = interior[
            int(np.argmin(np.linalg.norm(mesh.nodes[interior] - point, axis=1)))
        ]
        values[nearest] += 1.0 / mesh.masses[nearest]
    return values


def prepare(config: RunConfig) -> Workspace:
    domain = Domain.from_extent(config.domain.extent)
    mesh = build_mesh(domain, config.domain.shape)
    field = build_exponent_field(
        config.problem.p_expr,
        config.problem.q_expr,
        config.problem.s,
        domain,
        config.problem.sample_grid,
    )
    kernel = assemble_kernel(
        mesh, field, config.quadrature.rel_tol, config.quadrature.points
    )
    f = mesh.function(sample_data(config, mesh))
    problem = Problem(kernel=kernel, f=f, field=field)
    return Workspace(
        config=config, mesh=mesh, field=field, kernel=kernel, problem=problem
    )


def level_scale(sol: Solution) -> float:
    top = float(np.max(sol.u.values, initial=0.0))
    return top if top > 0 else 1.0


def max_relative_error(kernel: Kernel) -> float:
    positive = kernel.weights > 0
    if not np.any(positive):
        return 0.0
    return float(np.max(kernel.accuracy[positive] / kernel.weights[positive]))


def write_meta(ws: Workspace, command: str) -> None:
    field = ws.field
    meta = MetaDocument(
        command=command,
        created=datetime.now(timezone.utc).isoformat(),
        seed=ws.config.seed,
        dimension=ws.mesh.dimension,
        nodes=ws.mesh.size,
        s=field.s,
        p_minus=field.p_minus,
        p_plus=field.p_plus,
        q_minus=field.q_minus,
        q_plus=field.q_plus,
        kernel_p_minus=ws.kernel.p_minus,
        kernel_p_plus=ws.kernel.p_plus,
        max_quadrature_error=max_relative_error(ws.kernel),
        warnings=list(field.warnings),
    )
    write_json(ws.config.output_dir / "meta.json", meta)


def solution_document(sol: Solution) -> SolutionDocument:
    return SolutionDocument(
        values=[float(v) for v in sol.u.values],
        level=finite_or_none(sol.level),
        weak_residual=sol.weak_residual,
        iterations=sol.iterations,
        energy=sol.energy_value,
        smoothing_final=sol.smoothing_final,
        converged=sol.converged,
    )


def _open(
    config_path: str, output_dir: Optional[str], seed: Optional[int]
) -> RunConfig:
    config = load_config(config_path, output_dir=output_dir, seed=seed)
    config.display(config_path)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    return config


def run_solve(
    config_path: str, output_dir: Optional[str] = None, seed: Optional[int] = None
) -> int:
    def run() -> int:
        config = _open(config_path, output_dir, seed)
        ws = prepare(config)
        sol = minimize(ws.problem, opts=ws.options)
        directory = config.output_dir
        write_json(directory / "solution.json", solution_document(sol))
        atomic_write(directory / "kernel.txt", ws.kernel.to_text())
        write_meta(ws, "solve")
        sol.ensure_converged()
        log.notice(
            f"Solved on {ws.mesh.size} nodes in {ifmt(sol.iterations)} iterations, "
            f"weak residual {efmt(sol.weak_residual, 3)}, "
            f"max u {ffmt(float(np.max(sol.u.values)))}"
        )
        return EXIT_OK

    return guarded(run)


def sweep_rows(
    solutions: List[Solution], ks: List[float], gaps: Dict[float, List[SeriesPoint]]
) -> List[List[object]]:
    rows: List[List[object]] = []
    for index, sol in enumerate(solutions):
        row: List[object] = [
            sol.level,
            sol.energy_value,
            sol.weak_residual,
            sol.monotonicity_margin,
        ]
        row.extend(gaps[k][index].gap for k in ks)
        rows.append(row)
    return rows


def run_sweep(
    config_path: str, output_dir: Optional[str] = None, seed: Optional[int] = None
) -> int:
    def run() -> int:
        config = _open(config_path, output_dir, seed)
        if len(config.sweep.levels) < 2:
            raise ConfigError("sweep.levels", "a sweep needs at least two levels")
        ws = prepare(config)

        violation: Optional[str] = None
        try:
            solutions = approx_sequence(ws.problem, config.sweep.levels, ws.options)
        except MonotonicityViolation as exc:
            solutions = exc.solutions
            violation = exc.message

        scale = level_scale(solutions[-1])
        ks = [fraction * scale for fraction in config.diagnostics.k_fractions]
        gaps = {k: truncation_convergence(solutions, ws.kernel, k) for k in ks}
        header = ["n", "energy", "weak_residual", "monotonicity_margin"]
        header.extend(f"gap_k={k!r}" for k in ks)
        rows = sweep_rows(solutions, ks, gaps)
        write_csv(config.output_dir / "sweep.csv", header, rows)
        write_meta(ws, "sweep")

        table = Table(box=box.SIMPLE_HEAVY, title="Truncation sweep")
        for name in ("n", "Energy", "Residual", "Margin"):
            table.add_column(name, justify="right")
        for sol in solutions:
            table.add_row(
                f"{sol.level:g}",
                efmt(sol.energy_value, 6),
                efmt(sol.weak_residual, 2),
                mfmt(sol.monotonicity_margin),
            )
        log.print(table)

        if violation is not None:
            log.error(violation)
            return EXIT_MONOTONICITY
        if not all(sol.converged for sol in solutions):
            return EXIT_SOLVER
        return EXIT_OK

    return guarded(run)


def restarts(ws: Workspace, scale: float, count: int = 2) -> List[Solution]:
    """Independent solves from seeded random starting points."""
    rng = np.random.default_rng(ws.config.seed)
    return [
        minimize(
            ws.problem,
            ws.mesh.pinned(rng.uniform(0.0, scale, ws.mesh.size)),
            ws.options,
        )
        for _ in range(count)
    ]


def collect_checks(ws: Workspace, sol: Solution) -> ChecksDocument:
    config = ws.config
    diag = config.diagnostics
    problem = ws.problem
    scale = level_scale(sol)

    checks: List[CheckReport] = [residual_check(sol, problem, diag.residual_tol)]
    checks.extend(
        truncation_energy_check(sol, problem, f * scale) for f in diag.k_fractions
    )
    checks.extend(rh_tail_check(sol, problem, f * scale) for f in diag.h_fractions)
    for index, phi in enumerate(interior_bumps(ws.mesh, diag.bumps, config.seed)):
        for fraction in diag.sigma_fractions:
            for profile in ("value", "derivative"):
                checks.append(
                    renormalized_check(
                        sol, problem, fraction * scale, phi, profile, bump=index
                    )
                )

    space = FunctionSpace.of(ws.kernel, ws.field)
    ks = [scale * (j + 1) / diag.decay_points for j in range(diag.decay_points)]
    series = level_set_decay(sol, problem, ks, space)
    checks.extend(level_set_checks(series))

    first, second = restarts(ws, scale)
    discrepancy = uniqueness_discrepancy(
        first,
        second,
        problem,
        diag.uniqueness_k_fraction * scale,
        diag.uniqueness_sigma_fraction * scale,
    )
    checks.extend(uniqueness_checks(discrepancy, config.solver.tol))

    convergence: Dict[str, List[SeriesPoint]] = {}
    if len(config.sweep.levels) >= 2:
        try:
            sequence = approx_sequence(problem, config.sweep.levels, ws.options)
        except MonotonicityViolation as exc:
            sequence = exc.solutions
            checks.append(
                CheckReport.evaluate(
                    "monotonicity",
                    -exc.margin,
                    10.0 * config.solver.tol,
                    0.0,
                    n=exc.level,
                )
            )
        for f in diag.k_fractions:
            k = f * scale
            convergence[repr(k)] = truncation_convergence(sequence, ws.kernel, k)

    ratio: Optional[float] = None
    if diag.r_expr is not None:
        r = parse_expression(diag.r_expr, ws.mesh.dimension, Role.pointwise)
        r_values = r.evaluate_many(coordinate_env(r, ws.mesh.nodes))
    else:
        r_values = ws.field.p_bar(ws.mesh.nodes)
    try:
        ratio = embedding_ratio(sol.u, ws.kernel, ws.field, r_values)
    except ZeroSeminorm:
        log.info("Solution is identically zero, no embedding ratio to report")

    return ChecksDocument(
        passed=all(check.passed for check in checks),
        checks=checks,
        uniqueness=discrepancy,
        level_sets=series,
        truncation_convergence=convergence,
        embedding_ratio=ratio,
    )


def checks_table(document: ChecksDocument) -> Table:
    table = Table(box=box.SIMPLE_HEAVY, title="Checks")
    table.add_column("Check")
    table.add_column("Parameters")
    table.add_column("LHS", justify="right")
    table.add_column("RHS + slack", justify="right")
    table.add_column("Margin", justify="right")
    table.add_column("")
    for check in document.checks:
        params = ", ".join(
            f"{key}={value:.4g}" if isinstance(value, float) else f"{key}={value}"
            for key, value in check.context.items()
            if value is not None
        )
        table.add_row(
            check.name,
            params,
            efmt(check.lhs, 3),
            efmt(check.rhs + check.slack_allowance, 3),
            mfmt(check.margin),
            passfail(check.passed),
        )
    return table


def run_check(
    config_path: str, output_dir: Optional[str] = None, seed: Optional[int] = None
) -> int:
    def run() -> int:
        config = _open(config_path, output_dir, seed)
        ws = prepare(config)
        sol = minimize(ws.problem, opts=ws.options)
        document = collect_checks(ws, sol)
        write_json(config.output_dir / "checks.json", document)
        write_meta(ws, "check")
        log.print(checks_table(document))

        failed = [check.name for check in document.checks if not check.passed]
        if failed:
            names = ", ".join(sorted(set(failed)))
            log.error(f"{len(failed)} check(s) failed: {names}")
            return EXIT_CHECK_FAILED
        log.notice(f"All {len(document.checks)} checks passed")
        return EXIT_OK

    return guarded(run)


def run_norms(
    config_path: str,
    function: str,
    output_dir: Optional[str] = None,
    seed: Optional[int] = None,
) -> int:
    def run() -> int:
        config = _open(config_path, output_dir, seed)
        try:
            expr = parse_expression(function, config.domain.dimension, Role.pointwise)
        except (ExpressionSyntaxError, UnknownVariable) as exc:
            raise ConfigError("--function", exc.message) from exc

        ws = prepare(config)
        u = ws.mesh.function(expr.evaluate_many(coordinate_env(expr, ws.mesh.nodes)))
        space = FunctionSpace.of(ws.kernel, ws.field)

        table = Table(box=box.SIMPLE_HEAVY, title=f"Luxemburg norms of {function}")
        table.add_column("Norm")
        table.add_column("Value", justify="right")
        table.add_column("Modular residual", justify="right")
        table.add_column("Bisections", justify="right")
        for kind in ModularKind:
            result = luxemburg_norm_result(kind, space, u)
            table.add_row(
                kind.value,
                ffmt(result.value, 10),
                efmt(result.residual, 2),
                ifmt(result.iterations),
            )
        log.print(table)
        return EXIT_OK

    return guarded(run)
