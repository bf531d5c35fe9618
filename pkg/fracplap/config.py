from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import toml
from pydantic import BaseModel, Field, ValidationError, model_validator
from rich import box
from rich.console import Group
from rich.panel import Panel
from rich.table import Table
from rich.tree import Tree
from typing_extensions import Self

from fracplap import log
from fracplap.expression import (
    DomainError,
    ExpressionSyntaxError,
    Role,
    UnknownVariable,
    parse_expression,
)
from fracplap.fmt import efmt, ffmt, ifmt


class ConfigError(ValueError):
    def __init__(self, key: str, message: str) -> None:
        self.key = key
        self.message = f"Config error at {key}: {message}" if key else message
        super().__init__(self.message)


class DisplayMixin:
    def add_to_table(self, table: Table, section: str = "") -> None:
        raise NotImplementedError


def _floats(values: List[float]) -> str:
    return ", ".join(f"{v:g}" for v in values)


class DomainConfig(BaseModel, DisplayMixin):
    dimension: int = Field(default=1, ge=1, le=2)
    extent: List[List[float]] = Field(default_factory=lambda: [[0.0, 1.0]])
    resolution: Union[int, List[int]] = Field(default=64)

    @model_validator(mode="after")
    def check_extent(self) -> Self:
        if len(self.extent) != self.dimension:
            raise ValueError(
                f"domain.extent needs {self.dimension} axis interval(s), "
                f"got {len(self.extent)}"
            )
        for axis in self.extent:
            if len(axis) != 2 or not axis[1] > axis[0]:
                raise ValueError(f"domain.extent axis {axis} is not an interval [a, b]")
        shape = self.shape
        if len(shape) != self.dimension or any(r < 2 for r in shape):
            raise ValueError(
                f"domain.resolution must give at least 2 cells per axis, got {shape}"
            )
        return self

    @property
    def shape(self) -> List[int]:
        if isinstance(self.resolution, int):
            return [self.resolution] * self.dimension
        return list(self.resolution)

    def add_to_table(self, table: Table, section: str = "") -> None:
        table.add_row("[spring_green1]Domain")
        table.add_row("", "Dimension", "=", f"{self.dimension}")
        table.add_row(
            "",
            "Extent",
            "=",
            " x ".join(f"[{ffmt(lo, 3)}, {ffmt(hi, 3)}]" for lo, hi in self.extent),
        )
        table.add_row("", "Cells", "=", " x ".join(ifmt(r) for r in self.shape))


class ProblemConfig(BaseModel, DisplayMixin):
    s: float = Field(..., gt=0.0, lt=1.0)
    p_expr: str = Field(...)
    q_expr: Optional[str] = None
    f_expr: str = Field(default="0")
    f_spike: Optional[List[float]] = None
    sample_grid: int = Field(default=64, ge=8)

    def add_to_table(self, table: Table, section: str = "") -> None:
        table.add_section()
        table.add_row("[spring_green1]Problem")
        table.add_row("", "Order s", "=", f"{ffmt(self.s, 3)}")
        table.add_row("", "p(x,y)", "=", self.p_expr)
        table.add_row("", "q(x)", "=", self.q_expr or "p(x,x)")
        table.add_row("", "f(x)", "=", self.f_expr)
        if self.f_spike is not None:
            table.add_row("", "Unit spike at", "=", _floats(self.f_spike))
        table.add_row("", "Exponent sample grid", "=", ifmt(self.sample_grid))


class QuadratureConfig(BaseModel, DisplayMixin):
    rel_tol: float = Field(default=1e-6, gt=0.0)
    points: int = Field(default=4, ge=1, le=16)

    def add_to_table(self, table: Table, section: str = "") -> None:
        table.add_section()
        table.add_row("[spring_green1]Quadrature")
        table.add_row("", "Relative tolerance", "=", efmt(self.rel_tol, 1))
        table.add_row("", "Gauss points per axis", "=", ifmt(self.points))


class SolverConfig(BaseModel, DisplayMixin):
    tol: float = Field(default=1e-8, gt=0.0)
    max_iters: int = Field(default=20000, ge=1)
    smoothing_eps0: Optional[float] = Field(default=None, ge=0.0)

    def add_to_table(self, table: Table, section: str = "") -> None:
        table.add_section()
        table.add_row("[spring_green1]Solver")
        table.add_row("", "Weak residual tolerance", "=", efmt(self.tol, 1))
        table.add_row("", "Max iterations", "=", ifmt(self.max_iters))
        table.add_row(
            "",
            "Initial smoothing",
            "=",
            "auto" if self.smoothing_eps0 is None else efmt(self.smoothing_eps0, 2),
        )


class SweepConfig(BaseModel, DisplayMixin):
    levels: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0])

    @model_validator(mode="after")
    def check_levels(self) -> Self:
        if not self.levels:
            raise ValueError("sweep.levels must not be empty")
        if any(n <= 0 for n in self.levels):
            raise ValueError("sweep.levels must be positive")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("sweep.levels must be strictly increasing")
        return self

    def add_to_table(self, table: Table, section: str = "") -> None:
        table.add_section()
        table.add_row("[spring_green1]Truncation sweep")
        table.add_row("", "Levels n", "=", _floats(self.levels))


class DiagnosticsConfig(BaseModel, DisplayMixin):
    k_fractions: List[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0])
    h_fractions: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75, 0.9])
    sigma_fractions: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    uniqueness_k_fraction: float = Field(default=0.5, gt=0.0)
    uniqueness_sigma_fraction: float = Field(default=1.0, gt=0.0)
    r_expr: Optional[str] = None
    bumps: int = Field(default=5, ge=0)
    residual_tol: float = Field(default=1e-6, gt=0.0)
    decay_points: int = Field(default=8, ge=2)

    @model_validator(mode="after")
    def check_fractions(self) -> Self:
        for name in ("k_fractions", "h_fractions", "sigma_fractions"):
            values = getattr(self, name)
            if not values or any(v <= 0 for v in values):
                raise ValueError(f"diagnostics.{name} must be a nonempty positive list")
        if self.uniqueness_sigma_fraction < self.uniqueness_k_fraction:
            raise ValueError(
                "diagnostics.uniqueness_sigma_fraction must be >= uniqueness_k_fraction"
            )
        return self

    def add_to_table(self, table: Table, section: str = "") -> None:
        table.add_section()
        table.add_row("[spring_green1]Diagnostics (fractions of max u)")
        table.add_row("", "Truncation levels k", "=", _floats(self.k_fractions))
        table.add_row("", "Tail levels h", "=", _floats(self.h_fractions))
        table.add_row("", "Cutoff levels sigma", "=", _floats(self.sigma_fractions))
        table.add_row(
            "",
            "Uniqueness k, sigma",
            "=",
            _floats([self.uniqueness_k_fraction, self.uniqueness_sigma_fraction]),
        )
        table.add_row("", "Embedding exponent r(x)", "=", self.r_expr or "p(x,x)")
        table.add_row("", "Bump test functions", "=", ifmt(self.bumps))
        table.add_row("", "Residual tolerance", "=", efmt(self.residual_tol, 1))
        table.add_row("", "Level-set points", "=", ifmt(self.decay_points))


class OutputConfig(BaseModel, DisplayMixin):
    directory: str = Field(default="output")

    def add_to_table(self, table: Table, section: str = "") -> None:
        table.add_section()
        table.add_row("[spring_green1]Output")
        table.add_row("", "Directory", "=", self.directory)


class RunConfig(BaseModel, DisplayMixin):
    problem: ProblemConfig
    domain: DomainConfig = Field(default_factory=DomainConfig)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_expressions(self) -> Self:
        n = self.domain.dimension
        sources = [
            ("problem.p_expr", self.problem.p_expr, Role.pairwise),
            ("problem.q_expr", self.problem.q_expr, Role.pointwise),
            ("problem.f_expr", self.problem.f_expr, Role.pointwise),
            ("diagnostics.r_expr", self.diagnostics.r_expr, Role.pointwise),
        ]
        for key, source, role in sources:
            if source is None:
                continue
            try:
                parse_expression(source, n, role)
            except (ExpressionSyntaxError, UnknownVariable, DomainError) as exc:
                raise ValueError(f"{key}: {exc}") from exc
        if self.problem.f_spike is not None and len(self.problem.f_spike) != n:
            raise ValueError(f"problem.f_spike needs {n} coordinate(s)")
        return self

    @property
    def output_dir(self) -> Path:
        return Path(self.output.directory)

    def add_to_table(self, table: Table, section: str = "") -> None:
        self.domain.add_to_table(table)
        self.problem.add_to_table(table)
        self.quadrature.add_to_table(table)
        self.solver.add_to_table(table)
        self.sweep.add_to_table(table)
        self.diagnostics.add_to_table(table)
        self.output.add_to_table(table)
        table.add_row("", "Seed", "=", f"{self.seed}")

    def display(self, config_path: str) -> None:
        config_table = Table(box=box.SIMPLE_HEAVY)
        config_table.add_column("Section")
        config_table.add_column("Setting")
        config_table.add_column("")
        config_table.add_column("Value")
        self.add_to_table(config_table)

        tree = Tree(":control_knobs:")
        tree.add(Group(f":file_cabinet: Loaded from {config_path}", config_table))
        log.print(Panel(tree, title="Config"))


def normalize_config(config: Dict[str, Any]) -> Dict[str, Any]:
    # Accept the [mesh] and [truncation] spellings and fold them into their
    # canonical sections.
    if "mesh" in config:
        mesh = config.pop("mesh")
        domain = config.setdefault("domain", {})
        if "resolution" in mesh:
            if "resolution" in domain:
                raise ConfigError(
                    "mesh.resolution", "given both here and as domain.resolution"
                )
            domain["resolution"] = mesh.pop("resolution")
        if mesh:
            raise ConfigError(f"mesh.{next(iter(mesh))}", "unknown key")

    if "truncation" in config:
        truncation = config.pop("truncation")
        if "levels" in truncation:
            sweep = config.setdefault("sweep", {})
            if "levels" in sweep:
                raise ConfigError(
                    "truncation.levels", "given both here and as sweep.levels"
                )
            sweep["levels"] = truncation["levels"]

    domain = config.get("domain", {})
    extent = domain.get("extent")
    if isinstance(extent, list) and len(extent) == 2:
        if all(isinstance(v, (int, float)) for v in extent):
            domain["extent"] = [extent]

    problem = config.get("problem", {})
    if isinstance(problem, dict) and "f_spike" in problem:
        if isinstance(problem["f_spike"], (int, float)):
            problem["f_spike"] = [problem["f_spike"]]

    return config


def _error_key(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error["loc"])


def build_config(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(**normalize_config(raw))
    except ValidationError as exc:
        first = exc.errors()[0]
        message = str(first["msg"]).removeprefix("Value error, ")
        raise ConfigError(_error_key(first), message) from exc


def load_config(
    config_path: Union[str, Path],
    output_dir: Optional[str] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """Read, normalize and validate a run configuration.

    Command-line overrides are applied before validation so they are checked
    like any other value.
    """
    try:
        with open(config_path, "r", encoding="utf8") as file:
            raw = toml.loads(file.read())
    except OSError as exc:
        raise ConfigError("", f"Cannot read config {config_path}: {exc}") from exc
    except toml.TomlDecodeError as exc:
        raise ConfigError("", f"Malformed config {config_path}: {exc}") from exc

    if output_dir is not None:
        raw.setdefault("output", {})["directory"] = output_dir
    if seed is not None:
        raw["seed"] = seed
    return build_config(raw)
