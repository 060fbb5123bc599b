"""SGD with heavy-ball momentum."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, NonFiniteError


def sgd_step(params, grads, lr, momentum=0.0, velocity=None, names=None):
    """Update ``params`` in place: ``v <- momentum * v + g``; ``w <- w - lr * v``.

    Parameters
    ----------
    params, grads : list of ndarray
    lr : float
    momentum : float
    velocity : list of ndarray or None
        Momentum buffers, updated in place. Created (zeros) when None.
    names : list of str, optional
        Parameter names used in error messages.

    Returns
    -------
    velocity : list of ndarray
    """
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    # check everything before touching any parameter
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"#{i}"
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        if lr:
            p -= lr * v
    return velocity
