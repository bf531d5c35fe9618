"""Pairwise kernel weights for the measure dx dy / |x - y|^(N + s p).

Separated cell pairs are integrated by breadth-first dyadic subdivision with a
tensor Gauss-Legendre rule on every sub-pair (one point per axis is the
midpoint rule). A sub-pair is accepted once its coarse estimate agrees with
the sum over its children to `rel_tol`.

Congruent cells that share a face, edge or corner are self-similar under
subdivision: splitting both cells produces touching children of half size,
whose integrals scale by 2^(alpha - 2N), plus separated children. The touching
integrals are therefore the solution of a small linear system over the
touching offsets, with the separated children on the right-hand side.
"""

import functools
import itertools
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from fracplap import log
from fracplap.exponents import ExponentField, ExponentOutOfRange, OrderTooLarge
from fracplap.mesh import DiscreteFunction, Mesh
from fracplap.util import row_blocks

logger = logging.getLogger(__name__)

MAX_DEPTH = 40
MAX_ACTIVE_SUBPAIRS = 1 << 22
DEFAULT_REL_TOL = 1e-6
DEFAULT_RULE_POINTS = 4
EVAL_BUDGET = 1 << 21
ASSEMBLY_BLOCK = 512
KERNEL_HEADER = "fracplap-kernel v1"

Cell = Tuple[Sequence[float], Sequence[float]]


class BudgetExceeded(RuntimeError):
    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class DivergentPairWeight(BudgetExceeded):
    def __init__(self, alpha: float, dimension: int, radius: float) -> None:
        super().__init__(
            f"Pair integral with exponent {alpha:.6g} diverges for touching cells "
            f"in dimension {dimension} (self-similar spectral radius "
            f"{radius:.6g} >= 1)"
        )


class DisconnectedKernel(ValueError):
    def __init__(self, components: int) -> None:
        self.components = components
        self.message = f"Kernel graph has {components} connected components"
        super().__init__(self.message)


class KernelFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.message = message if line is None else f"line {line}: {message}"
        super().__init__(self.message)


@functools.lru_cache(maxsize=None)
def _corners(dimension: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=dimension)), dtype=float)


@functools.lru_cache(maxsize=None)
def _unit_rule(points: int, dimension: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(points)
    t = 0.5 * (x + 1.0)
    w = 0.5 * w
    nodes = np.array(list(itertools.product(t, repeat=dimension)))
    weights = np.array([np.prod(c) for c in itertools.product(w, repeat=dimension)])
    return nodes, weights


def _rule(
    a_lo: np.ndarray,
    a_size: np.ndarray,
    b_lo: np.ndarray,
    b_size: np.ndarray,
    alpha: np.ndarray,
    points: int,
) -> np.ndarray:
    dimension = a_lo.shape[1]
    nodes, weights = _unit_rule(points, dimension)
    q = len(weights)
    out = np.empty(a_lo.shape[0])
    for rows in row_blocks(a_lo.shape[0], max(1, EVAL_BUDGET // (q * q))):
        x = a_lo[rows, None, :] + a_size[rows, None, :] * nodes[None]
        y = b_lo[rows, None, :] + b_size[rows, None, :] * nodes[None]
        dist = np.sqrt(np.sum((x[:, :, None, :] - y[:, None, :, :]) ** 2, axis=-1))
        vals = dist ** (-alpha[rows, None, None])
        out[rows] = np.einsum("q,mqr,r->m", weights, vals, weights)
    return out * np.prod(a_size, axis=1) * np.prod(b_size, axis=1)


def _children(
    a_lo: np.ndarray,
    a_size: np.ndarray,
    b_lo: np.ndarray,
    b_size: np.ndarray,
    alpha: np.ndarray,
) -> Tuple[np.ndarray, ...]:
    m, dimension = a_lo.shape
    corners = _corners(dimension)
    k = len(corners)
    a_half = 0.5 * a_size
    b_half = 0.5 * b_size
    ca = a_lo[:, None, None, :] + corners[None, :, None, :] * a_half[:, None, None, :]
    cb = b_lo[:, None, None, :] + corners[None, None, :, :] * b_half[:, None, None, :]
    shape = (m, k, k, dimension)
    return (
        np.broadcast_to(ca, shape).reshape(m * k * k, dimension),
        np.repeat(a_half, k * k, axis=0),
        np.broadcast_to(cb, shape).reshape(m * k * k, dimension),
        np.repeat(b_half, k * k, axis=0),
        np.repeat(alpha, k * k),
    )


def separated_integrals(
    a_lo: np.ndarray,
    a_size: np.ndarray,
    b_lo: np.ndarray,
    b_size: np.ndarray,
    alpha: np.ndarray,
    rel_tol: float,
    points: int = DEFAULT_RULE_POINTS,
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrals of |x - y|^-alpha over disjoint cell pairs, with error estimates."""
    a_lo, a_size, b_lo, b_size = (
        np.atleast_2d(np.asarray(v, dtype=float)) for v in (a_lo, a_size, b_lo, b_size)
    )
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    m, dimension = a_lo.shape
    fan_out = len(_corners(dimension)) ** 2

    value = np.zeros(m)
    accuracy = np.zeros(m)
    owner = np.arange(m)
    coarse = _rule(a_lo, a_size, b_lo, b_size, alpha, points)
    for depth in range(MAX_DEPTH + 1):
        if owner.size == 0:
            break
        if depth == MAX_DEPTH:
            raise BudgetExceeded(
                f"Pair quadrature did not reach rel_tol={rel_tol:g} within "
                f"{MAX_DEPTH} subdivision levels"
            )
        children = _children(a_lo, a_size, b_lo, b_size, alpha)
        fine_each = _rule(*children, points).reshape(-1, fan_out)
        fine = np.sum(fine_each, axis=1)
        gap = np.abs(fine - coarse)
        done = gap <= rel_tol * np.abs(fine)
        np.add.at(value, owner[done], coarse[done])
        np.add.at(accuracy, owner[done], 2.0 * gap[done])

        keep = ~done
        active = int(np.count_nonzero(keep)) * fan_out
        if active > MAX_ACTIVE_SUBPAIRS:
            raise BudgetExceeded(
                f"Pair quadrature needs {active} sub-pairs at depth {depth + 1}"
            )
        a_lo, a_size, b_lo, b_size, alpha = (
            c.reshape((-1, fan_out) + c.shape[1:])[keep].reshape((-1,) + c.shape[1:])
            for c in children
        )
        coarse = fine_each[keep].reshape(-1)
        owner = np.repeat(owner[keep], fan_out)
        logger.debug("quadrature depth %d: %d active sub-pairs", depth + 1, owner.size)
    return value, accuracy


def touching_offsets(dimension: int) -> List[Tuple[int, ...]]:
    return [o for o in itertools.product((-1, 0, 1), repeat=dimension) if any(o)]


@functools.lru_cache(maxsize=4096)
def touching_table(
    alpha: float,
    spacing: Tuple[float, ...],
    rel_tol: float,
    points: int = DEFAULT_RULE_POINTS,
) -> Dict[Tuple[int, ...], Tuple[float, float]]:
    """Integrals over congruent touching cells, keyed by integer cell offset."""
    dimension = len(spacing)
    h = np.asarray(spacing, dtype=float)
    offsets = touching_offsets(dimension)
    position = {o: i for i, o in enumerate(offsets)}
    corners = _corners(dimension).astype(int)

    counts = np.zeros((len(offsets), len(offsets)))
    jobs_owner: List[int] = []
    jobs_a: List[np.ndarray] = []
    jobs_b: List[np.ndarray] = []
    for row, o in enumerate(offsets):
        for k in corners:
            for corner in corners:
                d = tuple(int(v) for v in 2 * np.asarray(o) + corner - k)
                if max(abs(v) for v in d) <= 1:
                    counts[row, position[d]] += 1
                else:
                    jobs_owner.append(row)
                    jobs_a.append(k * h / 2)
                    jobs_b.append((2 * np.asarray(o) + corner) * h / 2)

    half = np.tile(h / 2, (len(jobs_owner), 1))
    sep, sep_acc = separated_integrals(
        np.array(jobs_a),
        half,
        np.array(jobs_b),
        half,
        np.full(len(jobs_owner), alpha),
        rel_tol,
        points,
    )
    rhs = np.zeros(len(offsets))
    rhs_acc = np.zeros(len(offsets))
    np.add.at(rhs, np.array(jobs_owner), sep)
    np.add.at(rhs_acc, np.array(jobs_owner), sep_acc)

    scaled = 2.0 ** (alpha - 2 * dimension) * counts
    radius = float(np.max(np.abs(np.linalg.eigvals(scaled))))
    if radius >= 1.0:
        raise DivergentPairWeight(alpha, dimension, radius)
    system = np.eye(len(offsets)) - scaled
    values = np.linalg.solve(system, rhs)
    accuracy = np.linalg.solve(system, rhs_acc)
    return {o: (float(values[i]), float(accuracy[i])) for i, o in enumerate(offsets)}


def integrate_pair(
    cell_i: Cell,
    cell_j: Cell,
    s: float,
    p_ij: float,
    rel_tol: float = DEFAULT_REL_TOL,
    points: int = DEFAULT_RULE_POINTS,
) -> Tuple[float, float]:
    """Pair integral and its error estimate for two axis-aligned cells."""
    if rel_tol <= 0:
        raise ValueError(f"rel_tol must be positive, got {rel_tol}")
    lo_i, hi_i = (np.atleast_1d(np.asarray(v, dtype=float)) for v in cell_i)
    lo_j, hi_j = (np.atleast_1d(np.asarray(v, dtype=float)) for v in cell_j)
    dimension = lo_i.shape[0]
    alpha = dimension + s * p_ij

    if np.any((lo_j > hi_i) | (lo_i > hi_j)):
        value, accuracy = separated_integrals(
            lo_i, hi_i - lo_i, lo_j, hi_j - lo_j, np.array([alpha]), rel_tol, points
        )
        return float(value[0]), float(accuracy[0])

    size = hi_i - lo_i
    if not np.allclose(size, hi_j - lo_j, rtol=1e-12, atol=0.0):
        raise ValueError("Touching cells must be congruent")
    shift = (lo_j - lo_i) / size
    offset = np.round(shift)
    if not np.allclose(shift, offset, rtol=0.0, atol=1e-9):
        raise ValueError("Touching cells must be aligned on a common lattice")
    if not np.any(offset):
        raise ValueError("Pair weight needs two distinct cells")
    table = touching_table(alpha, tuple(float(v) for v in size), rel_tol, points)
    return table[tuple(int(v) for v in offset)]


def pair_weight(
    cell_i: Cell,
    cell_j: Cell,
    s: float,
    p_ij: float,
    rel_tol: float = DEFAULT_REL_TOL,
    points: int = DEFAULT_RULE_POINTS,
) -> float:
    return integrate_pair(cell_i, cell_j, s, p_ij, rel_tol, points)[0]


@dataclass(frozen=True, eq=False)
class Kernel:
    weights: np.ndarray
    exponents: np.ndarray
    masses: np.ndarray
    boundary: np.ndarray
    s: float
    dimension: int
    mesh_id: str
    accuracy: np.ndarray
    p_minus: float
    p_plus: float
    nodes: Optional[np.ndarray] = None
    collar: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.masses.shape[0])

    @property
    def excluded_support(self) -> np.ndarray:
        """Nodes where compactly supported test functions must vanish."""
        return self.boundary if self.collar is None else self.collar

    def check(self, u: DiscreteFunction) -> None:
        u.check_mesh(self.mesh_id)
        if len(u) != self.size:
            raise ValueError(f"Function has {len(u)} values, kernel has {self.size}")

    def pairs(self) -> Iterator[Tuple[int, int, float, float]]:
        rows, cols = np.triu_indices(self.size, 1)
        for i, j in zip(rows.tolist(), cols.tolist()):
            yield i, j, float(self.weights[i, j]), float(self.exponents[i, j])

    @classmethod
    def explicit(
        cls,
        weights: Sequence[Sequence[float]],
        exponents: Sequence[Sequence[float]],
        masses: Sequence[float],
        boundary: Optional[Sequence[bool]] = None,
        s: float = 0.5,
        dimension: int = 1,
        mesh_id: str = "explicit",
        nodes: Optional[Sequence[Sequence[float]]] = None,
    ) -> "Kernel":
        """A hand-made kernel, validated like an assembled one."""
        w = np.array(weights, dtype=float)
        p = np.array(exponents, dtype=float)
        m = np.array(masses, dtype=float)
        n = m.shape[0]
        if w.shape != (n, n) or p.shape != (n, n):
            raise ValueError("Weights and exponents must be square and match masses")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("Weights must be finite and nonnegative")
        if np.any(np.diagonal(w) != 0):
            raise ValueError("Kernel diagonal must be zero")
        if not (np.array_equal(w, w.T) and np.array_equal(p, p.T)):
            raise ValueError("Weights and exponents must be symmetric")
        if np.any(m <= 0):
            raise ValueError("Masses must be positive")
        off = ~np.eye(n, dtype=bool)
        if n > 1 and np.any(p[off] <= 1):
            raise ExponentOutOfRange("p_ij", float(np.min(p[off])))
        b = np.zeros(n, dtype=bool) if boundary is None else np.array(boundary, bool)
        _check_connected(w)
        pvals = p[off] if n > 1 else np.array([2.0])
        # diagonal pairs carry no weight; any admissible exponent will do
        np.fill_diagonal(p, 2.0)
        return cls._frozen(
            weights=w,
            exponents=p,
            masses=m,
            boundary=b,
            s=float(s),
            dimension=dimension,
            mesh_id=mesh_id,
            accuracy=np.zeros_like(w),
            p_minus=float(np.min(pvals)),
            p_plus=float(np.max(pvals)),
            nodes=None if nodes is None else np.array(nodes, dtype=float),
        )

    @classmethod
    def _frozen(cls, **fields: object) -> "Kernel":
        for value in fields.values():
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
        return cls(**fields)  # type: ignore[arg-type]

    def to_text(self) -> str:
        lines = [
            f"{KERNEL_HEADER} N={self.size}",
            f"meta s={self.s:.17g} dimension={self.dimension} mesh_id={self.mesh_id}",
        ]
        for i, j, w, p in self.pairs():
            lines.append(f"{i} {j} {w:.17g} {p:.17g}")
        lines.append("masses")
        lines.extend(f"{m:.17g}" for m in self.masses)
        lines.append("boundary")
        lines.extend("1" if b else "0" for b in self.boundary)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Kernel":
        lines = [line.strip() for line in text.splitlines()]
        lines = [line for line in lines if line]
        if not lines or not lines[0].startswith(KERNEL_HEADER + " N="):
            raise KernelFormatError(f"expected header '{KERNEL_HEADER} N=<n>'", 1)
        try:
            n = int(lines[0].split("N=", 1)[1])
        except ValueError:
            raise KernelFormatError("node count is not an integer", 1)

        meta = {"s": "0.5", "dimension": "1", "mesh_id": "explicit"}
        cursor = 1
        if cursor < len(lines) and lines[cursor].startswith("meta "):
            for item in lines[cursor].split()[1:]:
                key, _, value = item.partition("=")
                meta[key] = value
            cursor += 1

        weights = np.zeros((n, n))
        exponents = np.zeros((n, n))
        while cursor < len(lines) and lines[cursor] != "masses":
            parts = lines[cursor].split()
            if len(parts) != 4:
                raise KernelFormatError("expected 'i j w p'", cursor + 1)
            try:
                i, j = int(parts[0]), int(parts[1])
                w, p = float(parts[2]), float(parts[3])
            except ValueError:
                raise KernelFormatError("malformed pair row", cursor + 1)
            if not 0 <= i < j < n:
                raise KernelFormatError(f"pair ({i}, {j}) out of range", cursor + 1)
            weights[i, j] = weights[j, i] = w
            exponents[i, j] = exponents[j, i] = p
            cursor += 1

        masses = _read_block(lines, cursor, "masses", n, float)
        cursor += n + 1
        boundary = None
        if cursor < len(lines):
            boundary = _read_block(lines, cursor, "boundary", n, lambda v: v == "1")
        return cls.explicit(
            weights,
            exponents,
            masses,
            boundary=boundary,
            s=float(meta["s"]),
            dimension=int(meta["dimension"]),
            mesh_id=meta["mesh_id"],
        )


def _read_block(
    lines: List[str], cursor: int, name: str, n: int, cast: Callable[[str], Any]
) -> List[Any]:
    if cursor >= len(lines) or lines[cursor] != name:
        raise KernelFormatError(f"expected '{name}' block", cursor + 1)
    block = lines[cursor + 1 : cursor + 1 + n]
    if len(block) != n:
        raise KernelFormatError(f"'{name}' block needs {n} entries", cursor + 1)
    try:
        return [cast(v) for v in block]
    except ValueError:
        raise KernelFormatError(f"malformed '{name}' entry", cursor + 1)


def _check_connected(weights: np.ndarray) -> None:
    if weights.shape[0] <= 1:
        return
    components, _ = connected_components(csr_matrix(weights > 0), directed=False)
    if components > 1:
        raise DisconnectedKernel(int(components))


def assemble_kernel(
    mesh: Mesh,
    field: ExponentField,
    rel_tol: float = DEFAULT_REL_TOL,
    points: int = DEFAULT_RULE_POINTS,
) -> Kernel:
    if mesh.size < 2:
        raise ValueError("Kernel assembly needs at least two cells")
    if field.dimension != mesh.dimension:
        raise ValueError("Exponent field and mesh dimensions differ")

    n = mesh.size
    rows, cols = np.triu_indices(n, 1)
    p = field.symmetric_p(mesh.nodes[rows], mesh.nodes[cols])
    if np.min(p) <= 1:
        raise ExponentOutOfRange("p_ij", float(np.min(p)))
    if field.s * np.max(p) >= mesh.dimension:
        raise OrderTooLarge(field.s, float(np.max(p)), mesh.dimension)
    alpha = mesh.dimension + field.s * p
    offset = mesh.index[cols] - mesh.index[rows]
    spacing = mesh.spacing

    values = np.empty(rows.shape[0])
    accuracy = np.empty(rows.shape[0])

    # separated pairs depend only on (alpha, offset); integrate each class once
    separated = np.max(np.abs(offset), axis=1) >= 2
    if np.any(separated):
        keys = np.column_stack([alpha[separated], offset[separated]])
        unique, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        unique_value = np.empty(unique.shape[0])
        unique_acc = np.empty(unique.shape[0])
        blocks = row_blocks(unique.shape[0], ASSEMBLY_BLOCK)
        for block in log.track(blocks, "Assembling kernel weights", len(blocks)):
            sizes = np.tile(spacing, (len(block), 1))
            unique_value[block], unique_acc[block] = separated_integrals(
                np.zeros_like(sizes),
                sizes,
                unique[block, 1:] * spacing,
                sizes,
                unique[block, 0],
                rel_tol,
                points,
            )
        values[separated] = unique_value[inverse]
        accuracy[separated] = unique_acc[inverse]

    spacing_key = tuple(float(v) for v in spacing)
    for slot in np.flatnonzero(~separated):
        table = touching_table(float(alpha[slot]), spacing_key, rel_tol, points)
        values[slot], accuracy[slot] = table[tuple(int(v) for v in offset[slot])]

    weights = np.zeros((n, n))
    exponents = np.zeros((n, n))
    errors = np.zeros((n, n))
    weights[rows, cols] = weights[cols, rows] = values
    exponents[rows, cols] = exponents[cols, rows] = p
    errors[rows, cols] = errors[cols, rows] = accuracy
    exponents[np.arange(n), np.arange(n)] = field.p_bar(mesh.nodes)
    if not np.all(np.isfinite(weights)):
        raise BudgetExceeded("Kernel assembly produced non-finite weights")
    _check_connected(weights)

    kernel = Kernel._frozen(
        weights=weights,
        exponents=exponents,
        masses=np.array(mesh.masses),
        boundary=np.array(mesh.boundary),
        s=field.s,
        dimension=mesh.dimension,
        mesh_id=mesh.mesh_id,
        accuracy=errors,
        p_minus=min(field.p_minus, float(np.min(p))),
        p_plus=max(field.p_plus, float(np.max(p))),
        nodes=np.array(mesh.nodes),
        collar=mesh.collar(),
    )
    log.info(
        f"Assembled kernel on {n} nodes, p in [{kernel.p_minus:.4g}, "
        f"{kernel.p_plus:.4g}], max quadrature error estimate "
        f"{float(np.max(errors)):.3e}"
    )
    return kernel
