from typing import Dict, Iterable

import numpy as np

from pee.utils import instrumentation

Parameters = Dict[str, np.ndarray]


class Adam:
    """Adam optimizer over a dictionary of named arrays.

    Parameters are updated in place. Moment estimates are kept in float64
    regardless of the parameter dtype.
    """

    def __init__(
        self,
        learning_rate: float,
        *,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.learning_rate: float = learning_rate
        self.beta1: float = beta1
        self.beta2: float = beta2
        self.eps: float = eps
        self.steps: int = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} lr={self.learning_rate} steps={self.steps}>"

    def step(self, params: Parameters, grads: Parameters) -> None:
        instrumentation.count(instrumentation.OPTIMIZER_STEP)
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for name, grad in grads.items():
            if name not in self._m:
                self._m[name] = np.zeros(grad.shape, dtype=np.float64)
                self._v[name] = np.zeros(grad.shape, dtype=np.float64)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(grad)
            denominator = np.sqrt(v / correction2) + self.eps
            update = self.learning_rate * (m / correction1) / denominator
            params[name] -= update.astype(params[name].dtype, copy=False)


def global_norm(grads: Parameters) -> float:
    total = sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
    return float(np.sqrt(total))


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)
