import csv
import io
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from fracplap.util import atomic_write

ContextValue = Optional[Union[float, str]]


def finite_or_none(value: Optional[float]) -> Optional[float]:
    """JSON has no infinity; untruncated levels are written as null."""
    if value is None or not math.isfinite(value):
        return None
    return float(value)


class CheckReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    lhs: float
    rhs: float
    slack_allowance: float
    passed: bool
    context: Dict[str, ContextValue] = Field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.rhs + self.slack_allowance - self.lhs

    @classmethod
    def evaluate(
        cls,
        name: str,
        lhs: float,
        rhs: float,
        slack_allowance: float,
        **context: ContextValue,
    ) -> "CheckReport":
        return cls(
            name=name,
            lhs=float(lhs),
            rhs=float(rhs),
            slack_allowance=float(slack_allowance),
            passed=bool(lhs <= rhs + slack_allowance),
            context={
                key: finite_or_none(v) if isinstance(v, float) else v
                for key, v in context.items()
            },
        )


class DiscrepancyReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    J1: float
    J2: float
    J3: float
    J1_1: float
    k: float
    sigma: float
    pairing_bound: float
    max_gap: float

    @property
    def discrepancy(self) -> float:
        return abs(self.J1 + self.J2 - self.J3)


class LevelSetPoint(BaseModel):
    k: float
    measure: float
    bound: float


class LevelSetSeries(BaseModel):
    points: List[LevelSetPoint]
    constant: float
    embedding: float
    slope: Optional[float] = None


class SeriesPoint(BaseModel):
    n: Optional[float]
    gap: float


class SolutionDocument(BaseModel):
    values: List[float]
    level: Optional[float]
    weak_residual: float
    iterations: int
    energy: float
    smoothing_final: float
    converged: bool


class MetaDocument(BaseModel):
    command: str
    created: str
    seed: int
    dimension: int
    nodes: int
    s: float
    p_minus: float
    p_plus: float
    q_minus: float
    q_plus: float
    kernel_p_minus: float
    kernel_p_plus: float
    max_quadrature_error: float
    warnings: List[str]


class ChecksDocument(BaseModel):
    passed: bool
    checks: List[CheckReport]
    uniqueness: Optional[DiscrepancyReport] = None
    level_sets: Optional[LevelSetSeries] = None
    truncation_convergence: Dict[str, List[SeriesPoint]] = Field(default_factory=dict)
    embedding_ratio: Optional[float] = None


def write_json(path: Union[str, Path], document: BaseModel) -> Path:
    return atomic_write(path, document.model_dump_json(indent=2) + "\n")


def write_csv(
    path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence[Any]]
) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return atomic_write(path, buffer.getvalue())


def _cell(value: Any) -> str:  # noqa: ANN401
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        if math.isinf(value):
            return "inf"
        return repr(float(value))
    return str(value)
