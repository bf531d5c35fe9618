"""Variable-exponent modulars and their Luxemburg norms on discrete functions.

All double sums run over ordered node pairs, mirroring integration over
Omega x Omega, and are reduced in fixed row blocks so repeated runs agree
bitwise.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from fracplap.exponents import ExponentField
from fracplap.kernel import Kernel
from fracplap.mesh import DiscreteFunction
from fracplap.util import blocked_pair_sum

DEFAULT_NORM_TOL = 1e-10
MAX_DOUBLINGS = 200
MAX_BISECTIONS = 2000


class NonConvergence(RuntimeError):
    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class ModularKind(str, Enum):
    seminorm = "seminorm"
    lebesgue = "lebesgue"
    full = "full"


LebesgueExponents = Union[ExponentField, np.ndarray, float]


def node_exponents(kernel: Kernel, q: LebesgueExponents) -> np.ndarray:
    """Per-node Lebesgue exponents q(x_i)."""
    if isinstance(q, ExponentField):
        if kernel.nodes is None:
            raise ValueError("Kernel carries no node coordinates to evaluate q(x)")
        return q.q_values(kernel.nodes)
    return np.broadcast_to(np.asarray(q, dtype=float), (kernel.size,)).copy()


def _pair_modular(kernel: Kernel, values: np.ndarray) -> float:
    def block(rows: np.ndarray) -> np.ndarray:
        diff = np.abs(values[rows, None] - values[None, :])
        return kernel.weights[rows] * diff ** kernel.exponents[rows]

    return blocked_pair_sum(kernel.size, block)


def seminorm_modular(kernel: Kernel, u: DiscreteFunction) -> float:
    kernel.check(u)
    return _pair_modular(kernel, u.values)


def lebesgue_modular(kernel: Kernel, q: LebesgueExponents, u: DiscreteFunction) -> float:
    kernel.check(u)
    exponents = node_exponents(kernel, q)
    return float(np.sum(kernel.masses * np.abs(u.values) ** exponents))


def full_modular(kernel: Kernel, q: LebesgueExponents, u: DiscreteFunction) -> float:
    return seminorm_modular(kernel, u) + lebesgue_modular(kernel, q, u)


@dataclass(frozen=True)
class FunctionSpace:
    """A kernel together with the Lebesgue exponents of the boundary term."""

    kernel: Kernel
    q: np.ndarray

    @classmethod
    def of(cls, kernel: Kernel, q: LebesgueExponents) -> "FunctionSpace":
        return cls(kernel=kernel, q=node_exponents(kernel, q))

    def lower_exponent(self, kind: ModularKind) -> float:
        if kind == ModularKind.seminorm:
            return self.kernel.p_minus
        if kind == ModularKind.lebesgue:
            return float(np.min(self.q))
        return min(self.kernel.p_minus, float(np.min(self.q)))

    def modular(self, kind: ModularKind, values: np.ndarray) -> float:
        total = 0.0
        if kind in (ModularKind.seminorm, ModularKind.full):
            total += _pair_modular(self.kernel, values)
        if kind in (ModularKind.lebesgue, ModularKind.full):
            total += float(np.sum(self.kernel.masses * np.abs(values) ** self.q))
        return total


class NormResult(NamedTuple):
    value: float
    residual: float
    iterations: int


def luxemburg(
    modular: Callable[[float], float],
    p_minus: float,
    tol: float = DEFAULT_NORM_TOL,
    sup: Optional[float] = None,
) -> NormResult:
    """inf{lam > 0 : modular(lam) <= 1} for a modular given as lam -> rho(u / lam).

    `sup` is the sup norm of u, used to place the bracket when rho(u)
    overflows.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    rho = modular(1.0)
    if rho == 0:
        return NormResult(0.0, 0.0, 0)

    if math.isfinite(rho):
        scale = max(rho ** (1.0 / p_minus), 1e-300)
    elif sup is not None and 0 < sup < math.inf:
        scale = sup
    else:
        raise NonConvergence(f"Modular of u is not finite: {rho}")
    lo, hi = 1e-3 * scale, 1e3 * scale
    doublings = 0
    while modular(lo) < 1:
        lo /= 2
        doublings += 1
        if doublings > MAX_DOUBLINGS:
            raise NonConvergence("Luxemburg bracket expansion exceeded 200 doublings")
    while modular(hi) > 1:
        hi *= 2
        doublings += 1
        if doublings > MAX_DOUBLINGS:
            raise NonConvergence("Luxemburg bracket expansion exceeded 200 doublings")

    for iteration in range(1, MAX_BISECTIONS + 1):
        mid = math.sqrt(lo) * math.sqrt(hi)
        residual = modular(mid) - 1.0
        if abs(residual) <= tol:
            return NormResult(mid, abs(residual), iteration)
        if not lo < mid < hi:
            break
        if residual > 0:
            lo = mid
        else:
            hi = mid
    raise NonConvergence(
        f"Luxemburg bisection stalled at lambda={mid:.17g} with modular residual "
        f"{residual:.3e} > tol={tol:.3e}"
    )


def luxemburg_norm_result(
    kind: Union[ModularKind, str],
    context: Union[FunctionSpace, Kernel],
    u: DiscreteFunction,
    tol: float = DEFAULT_NORM_TOL,
) -> NormResult:
    kind = ModularKind(kind)
    if isinstance(context, Kernel):
        if kind != ModularKind.seminorm:
            raise ValueError(f"The {kind.value} norm needs Lebesgue exponents")
        space = FunctionSpace(kernel=context, q=np.full(context.size, 2.0))
    else:
        space = context
    space.kernel.check(u)
    values = u.values
    with np.errstate(over="ignore"):
        return luxemburg(
            lambda lam: space.modular(kind, values / lam),
            space.lower_exponent(kind),
            tol,
            float(np.max(np.abs(values), initial=0.0)),
        )


def luxemburg_norm(
    kind: Union[ModularKind, str],
    context: Union[FunctionSpace, Kernel],
    u: DiscreteFunction,
    tol: float = DEFAULT_NORM_TOL,
) -> float:
    return luxemburg_norm_result(kind, context, u, tol).value
