"""Parameter initialization.

Recurrent weight blocks use orthogonal matrices (QR of a Gaussian draw with
the sign fix from the diagonal of R); convolutional and dense weights use
fan-in scaled uniform; biases start at zero except the LSTM forget gate,
which starts at +1.0 to keep early memory open.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng


def orthogonal(rng: Rng, rows: int, cols: int, dtype=np.float64) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols], dtype=dtype)


def fan_in_uniform(rng: Rng, shape: tuple, dtype=np.float64) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def zeros(shape: tuple, dtype=np.float64) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)
