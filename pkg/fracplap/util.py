import os
import tempfile
from pathlib import Path
from typing import Callable, List, Union

import numpy as np
from more_itertools import chunked

# Row block size for pair reductions. Fixed so that repeated runs add the
# same partial sums in the same order.
PAIR_BLOCK_ROWS = 256


def row_blocks(n: int, block: int = PAIR_BLOCK_ROWS) -> List[np.ndarray]:
    return [np.asarray(rows, dtype=np.intp) for rows in chunked(range(n), block)]


def blocked_pair_sum(
    n: int,
    block_term: Callable[[np.ndarray], np.ndarray],
    block: int = PAIR_BLOCK_ROWS,
) -> float:
    """Sum a pairwise quantity over ordered pairs, one row block at a time.

    `block_term(rows)` returns the (len(rows), n) array of pair terms for the
    given rows. Block partials are combined in row order.
    """
    partials = [float(np.sum(block_term(rows))) for rows in row_blocks(n, block)]
    return float(np.sum(np.asarray(partials, dtype=float))) if partials else 0.0


def atomic_write(path: Union[str, Path], text: str) -> Path:
    """Write text to `path` through a temporary file in the same directory."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(
        dir=target.parent, prefix=f".{target.name}.", suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "w", encoding="utf8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target
