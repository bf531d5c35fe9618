import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from fracplap import log
from fracplap.expression import (
    Expression,
    Role,
    coordinate_env,
    parse_expression,
)
from fracplap.mesh import Domain

SYMMETRY_TOL = 1e-12
DEFAULT_GRID = 64


class AsymmetricExponent(ValueError):
    def __init__(self, defect: float, x: np.ndarray, y: np.ndarray) -> None:
        self.defect = defect
        self.message = (
            f"p(x,y) is not symmetric: |p(x,y) - p(y,x)| = {defect:.3e} "
            f"at x={x.tolist()}, y={y.tolist()}"
        )
        super().__init__(self.message)


class ExponentOutOfRange(ValueError):
    def __init__(self, name: str, value: float) -> None:
        self.name = name
        self.value = value
        self.message = f"Exponent {name} must exceed 1 everywhere, found {value:.6g}"
        super().__init__(self.message)


class OrderTooLarge(ValueError):
    def __init__(self, s: float, p_plus: float, dimension: int) -> None:
        self.message = (
            f"s*p must stay below N={dimension}, found s*p_plus = "
            f"{s}*{p_plus:.6g} = {s * p_plus:.6g}"
        )
        super().__init__(self.message)


@dataclass(frozen=True)
class ExponentField:
    p: Expression
    q_expr: Optional[Expression]
    s: float
    dimension: int
    p_minus: float
    p_plus: float
    q_minus: float
    q_plus: float
    sample_grid_resolution: int
    warnings: Tuple[str, ...] = ()

    def p_values(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """p(x, y) on point arrays of shape (..., N)."""
        return self.p.evaluate_many(coordinate_env(self.p, x, y))

    def symmetric_p(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return 0.5 * (self.p_values(x, y) + self.p_values(y, x))

    def q_values(self, x: np.ndarray) -> np.ndarray:
        """q(x), or p(x, x) when no q was given."""
        if self.q_expr is None:
            return self.p_values(x, x)
        return self.q_expr.evaluate_many(coordinate_env(self.q_expr, x))

    def p_bar(self, x: np.ndarray) -> np.ndarray:
        return self.p_values(x, x)


def sample_points(domain: Domain, grid: int) -> np.ndarray:
    per_axis = grid if domain.dimension == 1 else math.ceil(math.sqrt(grid))
    return domain.lattice(per_axis)


def build_exponent_field(
    p_src: str,
    q_src: Optional[str],
    s: float,
    domain: Domain,
    grid: int = DEFAULT_GRID,
) -> ExponentField:
    if not 0 < s < 1:
        raise ValueError(f"Order s must lie in (0, 1), got {s}")
    if grid < 8:
        raise ValueError(f"Sample grid resolution must be at least 8, got {grid}")

    dimension = domain.dimension
    p = parse_expression(p_src, dimension, Role.pairwise)
    q = parse_expression(q_src, dimension, Role.pointwise) if q_src else None

    points = sample_points(domain, grid)
    x = points[:, None, :]
    y = points[None, :, :]
    env = coordinate_env(p, x, y)
    p_xy = p.evaluate_many(env)
    p_yx = p.evaluate_many(coordinate_env(p, y, x))

    p_minus = float(np.min(p_xy))
    p_plus = float(np.max(p_xy))
    if p_minus <= 1:
        raise ExponentOutOfRange("p", p_minus)

    defect = np.abs(p_xy - p_yx)
    worst = np.unravel_index(int(np.argmax(defect)), defect.shape)
    if defect[worst] > SYMMETRY_TOL:
        raise AsymmetricExponent(
            float(defect[worst]), points[worst[0]], points[worst[1]]
        )

    if s * p_plus >= dimension:
        raise OrderTooLarge(s, p_plus, dimension)

    if q is None:
        q_samples = np.diagonal(p_xy)
    else:
        q_samples = q.evaluate_many(coordinate_env(q, points))
    q_minus = float(np.min(q_samples))
    q_plus = float(np.max(q_samples))
    if q_minus <= 1:
        raise ExponentOutOfRange("q", q_minus)

    warnings: Tuple[str, ...] = ()
    if s * p_minus <= 1:
        notice = (
            f"s*p_minus = {s * p_minus:.6g} <= 1: outside the trace regime "
            "s*p_minus > 1, boundary values are imposed only through the "
            "function space"
        )
        log.warning(notice)
        warnings = (notice,)

    return ExponentField(
        p=p,
        q_expr=q,
        s=float(s),
        dimension=dimension,
        p_minus=p_minus,
        p_plus=p_plus,
        q_minus=q_minus,
        q_plus=q_plus,
        sample_grid_resolution=grid,
        warnings=warnings,
    )
