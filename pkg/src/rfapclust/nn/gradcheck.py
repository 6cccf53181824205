"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError


def gradient_check(net, loss_fn, eps: float = 1e-6, n_checks: int = 200, seed: int = 0,
                   names=None) -> float:
    """Max relative error between analytic and numeric gradients.

    ``loss_fn(net)`` must return ``(loss, grads)`` with ``grads`` keyed by
    parameter name.  Up to ``n_checks`` trainable entries are drawn at
    random (all of them when there are fewer).  Relative error is
    ``|ga - gn| / (|ga| + |gn| + 1e-12)``.
    """
    if net.dtype != np.float64:
        raise ConfigError("gradient checks need a float64 network")
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError("eps must lie in [1e-7, 1e-4]")
    names = net.trainable_names() if names is None else list(names)
    _, grads = loss_fn(net)
    entries = [(n, i) for n in names for i in range(net.params[n].size)]
    rng = np.random.default_rng(seed)
    if len(entries) > n_checks:
        entries = [entries[k] for k in rng.choice(len(entries), n_checks, replace=False)]
    worst = 0.0
    for name, i in entries:
        flat = net.params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up, _ = loss_fn(net)
        flat[i] = old - eps
        down, _ = loss_fn(net)
        flat[i] = old
        numeric = (up - down) / (2 * eps)
        analytic = grads[name].reshape(-1)[i] if name in grads else 0.0
        err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
