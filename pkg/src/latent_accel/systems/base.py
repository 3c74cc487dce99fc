"""Shared pieces of the benchmark systems: the OdeSystem record and call counting."""

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from ..autodiff import shape_of


class FunctionCounter:
    """Lock-protected count of right-hand-side evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, calls: int = 1) -> None:
        with self._lock:
            self._count += calls

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> int:
        with self._lock:
            previous, self._count = self._count, 0
            return previous


@dataclass
class OdeSystem:
    """Autonomous system dx/dt = f(x) with its sampling box and horizon.

    ``rhs`` maps a state of shape (n,) or a batch (B, n) to derivatives of the
    same shape, and accepts dual or tape-valued arrays as well as numpy ones.
    """

    name: str
    dim: int
    rhs: Callable
    lower: np.ndarray
    upper: np.ndarray
    horizon: Tuple[float, float]
    exact: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    counter: FunctionCounter = field(default_factory=FunctionCounter)

    def __call__(self, x):
        shape = shape_of(x)
        self.counter.add(1 if len(shape) == 1 else int(np.prod(shape[:-1])))
        return self.rhs(x)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lower) & (points <= self.upper), axis=-1)

    def scaled_box(self, factor: float) -> Tuple[np.ndarray, np.ndarray]:
        """Box with the same centre and each half-width multiplied by factor."""
        centre = 0.5 * (self.lower + self.upper)
        half = 0.5 * (self.upper - self.lower) * factor
        return centre - half, centre + half

    def with_counter(self) -> "OdeSystem":
        """Same system, private call counter (for concurrent runs)."""
        return OdeSystem(self.name, self.dim, self.rhs, self.lower, self.upper,
                         self.horizon, self.exact)
