"""Three-state linear system with a fast -20 mode and a slow decaying oscillation."""

from typing import Tuple

import numpy as np

from .. import autodiff as ad
from .base import OdeSystem

LINEAR_MATRIX = np.array([
    [33.0, 17.0, -70.0],
    [42.0, 18.0, -80.0],
    [37.0, 18.0, -75.0],
])

LINEAR_HORIZON = (0.0, 2.0)
DECAY_HORIZON = (0.0, 1.0)


def linear_rhs(x):
    return ad.matmul(x, LINEAR_MATRIX.T)


def _real_blocks(M: np.ndarray) -> Tuple[np.ndarray, list]:
    """Real basis T and block list so that M T = T blockdiag(blocks).

    Real eigenvalues give 1x1 blocks, a complex pair a +- ib with eigenvector
    p + iq gives the block [[a, b], [-b, a]] on columns (p, q).
    """
    eigvals, eigvecs = np.linalg.eig(M)
    columns, blocks = [], []
    for value, vector in zip(eigvals, eigvecs.T):
        if abs(value.imag) < 1e-12:
            columns.append(vector.real)
            blocks.append(('real', value.real))
        elif value.imag > 0:
            columns.extend([vector.real, vector.imag])
            blocks.append(('pair', value.real, value.imag))
    return np.column_stack(columns), blocks


_BASIS, _BLOCKS = _real_blocks(LINEAR_MATRIX)
_BASIS_INV = np.linalg.inv(_BASIS)


def linear_exact(x0, t) -> np.ndarray:
    """exp(M t) x0 for a scalar t or an array of times (rows of the result)."""
    x0 = np.asarray(x0, dtype=np.float64)
    times = np.atleast_1d(np.asarray(t, dtype=np.float64))
    coords = _BASIS_INV @ x0
    out = np.empty((times.size, coords.size))
    col = 0
    for block in _BLOCKS:
        if block[0] == 'real':
            out[:, col] = np.exp(block[1] * times) * coords[col]
            col += 1
        else:
            _, a, b = block
            decay = np.exp(a * times)
            c, s = np.cos(b * times), np.sin(b * times)
            p, q = coords[col], coords[col + 1]
            out[:, col] = decay * (c * p + s * q)
            out[:, col + 1] = decay * (-s * p + c * q)
            col += 2
    result = out @ _BASIS.T
    return result[0] if np.ndim(t) == 0 else result


def linear_system(box: float = 1.0) -> OdeSystem:
    return OdeSystem(
        name="linear",
        dim=3,
        rhs=linear_rhs,
        lower=-box * np.ones(3),
        upper=box * np.ones(3),
        horizon=LINEAR_HORIZON,
        exact=linear_exact,
    )


def decay_system(rate: float = 20.0, box: float = 1.0) -> OdeSystem:
    """Scalar x' = -rate x, the smallest problem with one fast mode."""

    def rhs(x):
        return ad.mul(-rate, x)

    def exact(x0, t):
        times = np.atleast_1d(np.asarray(t, dtype=np.float64))
        result = np.exp(-rate * times)[:, None] * np.asarray(x0, dtype=np.float64)[None, :]
        return result[0] if np.ndim(t) == 0 else result

    return OdeSystem(
        name="decay",
        dim=1,
        rhs=rhs,
        lower=-box * np.ones(1),
        upper=box * np.ones(1),
        horizon=DECAY_HORIZON,
        exact=exact,
    )
