"""Dense float64 tensor values.

Every value in this library is a C-contiguous ``numpy.float64`` array
(0-d scalars included).  ``as_tensor`` is the validating constructor for
data arriving from outside (configs, CSV files, user code): it rejects
NaN/Inf once at the boundary.  Internal arithmetic trusts the closed
operation set; overflow produced inside a training step is surfaced by
the loss finiteness checks rather than per-op validation.

All computations are 64-bit.  The closed-form oracles demand agreement
down to 1e-8 .. 1e-12, which single precision cannot deliver.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = ["TensorError", "as_tensor", "require_finite"]


class TensorError(ValueError):
    """Malformed tensor data: wrong size for shape, or non-finite entries."""


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a validated float64 C-order array.

    ``data`` may be a scalar, a nested sequence, or an ndarray; ``shape``
    optionally reshapes flat data (length must match the shape's size).
    Non-finite entries raise :class:`TensorError`.
    """
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise TensorError(f"shape entries must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise TensorError(
                f"data of size {arr.size} cannot fill shape {shape}"
            )
        arr = arr.reshape(shape)
    require_finite(arr, what="tensor data")
    return arr


def require_finite(arr: np.ndarray, what: str = "value") -> np.ndarray:
    """Raise :class:`TensorError` unless every entry of ``arr`` is finite."""
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise TensorError(f"{what} contains {bad} non-finite entries")
    return arr
