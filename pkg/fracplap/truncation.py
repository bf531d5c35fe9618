"""Truncation and cutoff calculus, scalar and lifted to node arrays."""

from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np

from fracplap.mesh import DiscreteFunction

Scalar = Union[float, np.ndarray]
Lifted = Union[float, np.ndarray, DiscreteFunction]


def _positive(name: str, value: float) -> None:
    if not value > 0:
        raise ValueError(f"Cutoff parameter {name} must be positive, got {value}")


def truncate(k: float, t: Lifted) -> Lifted:
    """T_k(t) = max(-k, min(k, t))."""
    _positive("k", k)
    if isinstance(t, DiscreteFunction):
        return t.with_values(np.clip(t.values, -k, k))
    if np.ndim(t) == 0:
        return float(max(-k, min(k, t)))
    return np.clip(t, -k, k)


def tail_part(h: float, t: Lifted) -> Lifted:
    """G_h(t) = t - T_h(t)."""
    if isinstance(t, DiscreteFunction):
        return t.with_values(t.values - truncate(h, t.values))
    return t - truncate(h, t)


def smooth_cutoff(sigma: float, r: Scalar) -> Tuple[Scalar, Scalar]:
    """S_sigma(r) and S'_sigma(r).

    Identity on |r| < sigma, quadratic taper on [sigma, sigma + 1] and constant
    +-(sigma + 1/2) beyond.
    """
    _positive("sigma", sigma)
    scalar = np.ndim(r) == 0
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    sign = np.sign(r)
    taper = (a >= sigma) & (a <= sigma + 1)
    outside = a > sigma + 1
    value = np.where(
        outside,
        sign * (sigma + 0.5),
        np.where(taper, sign * ((sigma + 0.5) - 0.5 * (a - sigma - 1) ** 2), r),
    )
    derivative = np.where(outside, 0.0, np.where(taper, sigma + 1 - a, 1.0))
    if scalar:
        return float(value), float(derivative)
    return value, derivative


def cutoff_value(sigma: float, r: Scalar) -> Scalar:
    return smooth_cutoff(sigma, r)[0]


def cutoff_derivative(sigma: float, r: Scalar) -> Scalar:
    return smooth_cutoff(sigma, r)[1]


def in_Rh(h: float, v: Scalar, w: Scalar) -> Union[bool, np.ndarray]:  # noqa: N802
    """Pairs where one value reaches h + 1 while the other stays at or below h
    or has the opposite sign."""
    _positive("h", h)
    av, aw = np.abs(v), np.abs(w)
    member = (np.maximum(av, aw) >= h + 1) & (
        (np.minimum(av, aw) <= h) | (np.multiply(v, w) < 0)
    )
    if np.ndim(member) == 0:
        return bool(member)
    return member


class CutoffKind(str, Enum):
    T = "T"
    G = "G"
    S = "S"


@dataclass(frozen=True)
class CutoffSpec:
    kind: CutoffKind
    parameter: float

    def __post_init__(self) -> None:
        _positive(self.kind.value, self.parameter)

    def __call__(self, t: Scalar) -> Scalar:
        if self.kind == CutoffKind.T:
            return truncate(self.parameter, t)
        if self.kind == CutoffKind.G:
            return tail_part(self.parameter, t)
        return cutoff_value(self.parameter, t)
