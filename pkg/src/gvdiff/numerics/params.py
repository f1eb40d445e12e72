from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class Parameter:
    """A named trainable array with a gradient accumulator of the same shape.

    ``group`` tags which training stage owns the parameter (``base``,
    ``stga``, ``temporal`` or ``dgn``).
    """

    name: str
    data: np.ndarray
    group: str = "base"
    trainable: bool = True
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g):
        self.grad += np.reshape(g, self.data.shape)
