from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np


class MeshMismatch(ValueError):
    def __init__(self, expected: str, found: str) -> None:
        self.message = f"Function lives on mesh {found}, expected mesh {expected}"
        super().__init__(self.message)


@dataclass(frozen=True)
class Domain:
    """An interval (N=1) or axis-aligned rectangle (N=2)."""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper) or len(self.lower) not in (1, 2):
            raise ValueError("Domain must be an interval or a rectangle")
        for lo, hi in zip(self.lower, self.upper):
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
                raise ValueError(f"Domain extent [{lo}, {hi}] has no positive length")

    @classmethod
    def from_extent(cls, extent: Sequence[Sequence[float]]) -> "Domain":
        return cls(
            lower=tuple(float(axis[0]) for axis in extent),
            upper=tuple(float(axis[1]) for axis in extent),
        )

    @property
    def dimension(self) -> int:
        return len(self.lower)

    @property
    def measure(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def lattice(self, per_axis: int) -> np.ndarray:
        """Points of the closed domain on a uniform lattice, shape (per_axis**N, N)."""
        axes = [
            np.linspace(lo, hi, per_axis) for lo, hi in zip(self.lower, self.upper)
        ]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)


@dataclass(frozen=True, eq=False)
class DiscreteFunction:
    values: np.ndarray
    mesh_id: str
    boundary_zero: bool = False

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def check_mesh(self, mesh_id: str) -> None:
        if self.mesh_id != mesh_id:
            raise MeshMismatch(mesh_id, self.mesh_id)

    def with_values(
        self, values: np.ndarray, boundary_zero: Optional[bool] = None
    ) -> "DiscreteFunction":
        return DiscreteFunction(
            values=values,
            mesh_id=self.mesh_id,
            boundary_zero=self.boundary_zero
            if boundary_zero is None
            else boundary_zero,
        )

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class Mesh:
    domain: Domain
    shape: Tuple[int, ...]
    nodes: np.ndarray
    masses: np.ndarray
    boundary: np.ndarray
    index: np.ndarray
    mesh_id: str = field(default="")

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.domain.upper) - np.asarray(self.domain.lower)) / (
            np.asarray(self.shape)
        )

    @property
    def interior(self) -> np.ndarray:
        return ~self.boundary

    def cell(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.domain.lower) + self.index[i] * self.spacing
        return lo, lo + self.spacing

    def collar(self) -> np.ndarray:
        """Boundary-flagged nodes and their immediate neighbours."""
        shape = np.asarray(self.shape)
        near = (self.index <= 1) | (self.index >= shape - 2)
        return np.any(near, axis=1)

    def function(
        self, values: Union[np.ndarray, Sequence[float]], boundary_zero: bool = False
    ) -> DiscreteFunction:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size,):
            raise ValueError(
                f"Expected {self.size} node values, got array of shape {values.shape}"
            )
        if boundary_zero and np.any(values[self.boundary] != 0):
            raise ValueError("Boundary-zero function has nonzero boundary values")
        return DiscreteFunction(values, self.mesh_id, boundary_zero)

    def pinned(self, values: Union[np.ndarray, Sequence[float]]) -> DiscreteFunction:
        """Boundary-zero function with boundary values overwritten by 0."""
        values = np.array(values, dtype=float)
        values[self.boundary] = 0.0
        return self.function(values, boundary_zero=True)

    def zeros(self) -> DiscreteFunction:
        return self.function(np.zeros(self.size), boundary_zero=True)

    def nearest_node(self, point: Sequence[float]) -> int:
        distance = np.linalg.norm(self.nodes - np.asarray(point, dtype=float), axis=1)
        return int(np.argmin(distance))


def build_mesh(domain: Domain, resolution: Union[int, Sequence[int]]) -> Mesh:
    if isinstance(resolution, (int, np.integer)):
        shape = (int(resolution),) * domain.dimension
    else:
        shape = tuple(int(r) for r in resolution)
    if len(shape) != domain.dimension:
        raise ValueError(
            f"Resolution {shape} does not match domain dimension {domain.dimension}"
        )
    if any(r < 2 for r in shape):
        raise ValueError(f"Resolution must be at least 2 per axis, got {shape}")

    lower = np.asarray(domain.lower)
    spacing = (np.asarray(domain.upper) - lower) / np.asarray(shape)
    index = np.indices(shape).reshape(len(shape), -1).T.astype(np.int64)
    nodes = lower + (index + 0.5) * spacing
    masses = np.full(index.shape[0], float(np.prod(spacing)))
    boundary = np.any((index == 0) | (index == np.asarray(shape) - 1), axis=1)

    for array in (nodes, masses, boundary, index):
        array.setflags(write=False)
    mesh_id = "{}d:{}:{}:{}".format(
        domain.dimension,
        "x".join(str(r) for r in shape),
        ",".join(repr(v) for v in domain.lower),
        ",".join(repr(v) for v in domain.upper),
    )
    return Mesh(
        domain=domain,
        shape=shape,
        nodes=nodes,
        masses=masses,
        boundary=boundary,
        index=index,
        mesh_id=mesh_id,
    )
