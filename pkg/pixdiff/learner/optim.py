from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..core.errors import require
from .network import Params


@dataclass(eq=False)
class Adam:
    """
    Adaptive-moment gradient descent, updating parameter blocks in place.

    Attributes:
        learning_rate (float): step size.
        beta1 (float): decay of the first-moment estimate.
        beta2 (float): decay of the second-moment estimate.
        eps (float): added to the root of the second moment.
        step_count (int): updates applied so far; drives the bias correction.
        m (Params): first moments, one block per parameter block.
        v (Params): second moments.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def __post_init__(self) -> None:
        require(self.learning_rate > 0, f"learning rate must be > 0, got {self.learning_rate}")
        require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "Adam betas must lie in [0, 1)")
        require(self.eps > 0, f"Adam eps must be > 0, got {self.eps}")

    def step(self, params: Params, grads: Params) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for name, grad in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(grad)
                self.v[name] = np.zeros_like(grad)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad**2
            update = self.learning_rate * (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            params[name] -= update

    def state_blocks(self) -> Dict[str, np.ndarray]:
        blocks = {f"adam.m.{name}": block for name, block in self.m.items()}
        blocks.update({f"adam.v.{name}": block for name, block in self.v.items()})
        return blocks

    def load_blocks(self, blocks: Dict[str, np.ndarray]) -> None:
        self.m = {name[len("adam.m.") :]: b.copy() for name, b in blocks.items() if name.startswith("adam.m.")}
        self.v = {name[len("adam.v.") :]: b.copy() for name, b in blocks.items() if name.startswith("adam.v.")}
