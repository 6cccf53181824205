"""SGD with momentum and L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NumericError


@dataclass
class SGDConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")


class SGD:
    """``v <- momentum*v + grad + decay*param``; ``param <- param - lr*v``.

    Only parameters present in ``grads`` and not frozen are touched.
    """

    def __init__(self, config: SGDConfig):
        self.config = config
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, net, grads: dict):
        cfg = self.config
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NumericError(f"non-finite gradient in {', '.join(sorted(bad))}")
        for name, g in grads.items():
            if name in net.frozen:
                continue
            p = net.params[name]
            v = self.velocity.get(name)
            if v is None or v.shape != p.shape:
                v = np.zeros_like(p)
            v = cfg.momentum * v + g + cfg.weight_decay * p
            self.velocity[name] = v
            net.params[name] = p - cfg.learning_rate * v
