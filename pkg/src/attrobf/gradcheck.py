"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def numerical_grad(f, x, h=1e-5):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` is perturbed in place one element at a time and restored.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-7):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps entries whose true value is zero (dead ReLUs, unrouted
    pooling cells) from dividing finite-difference round-off by zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f"{k}: {v:.3e} {'ok' if v < self.tolerance else 'FAIL'}" for k, v in self.errors.items()]
        return "\n".join(lines)


def grad_check(forward, backward, arrays, tolerance=1e-4, h=1e-5, seed=0):
    """Compare analytic and finite-difference gradients of a layer.

    The layer output ``y = forward(**arrays)`` is reduced to a scalar by a fixed
    random projection ``sum(y * r)``, so ``r`` is the upstream gradient handed
    to ``backward``.

    Parameters
    ----------
    forward : callable
        ``forward(**arrays) -> y`` (extra return values such as caches are
        accepted when ``y`` is the first element of a tuple).
    backward : callable
        ``backward(r, **arrays) -> dict`` mapping names in ``arrays`` to
        analytic gradients. Names absent from the dict are not checked.
    arrays : dict of str -> ndarray
        Float64 inputs and parameters; modified and restored during the check.

    Returns
    -------
    GradCheckReport
    """
    from .rng import Rng

    def out():
        y = forward(**arrays)
        return y[0] if isinstance(y, tuple) else y

    y0 = np.asarray(out())
    r = Rng(seed).normal(y0.shape) if y0.shape else np.float64(Rng(seed).normal())
    analytic = backward(r, **arrays)
    report = GradCheckReport(tolerance)
    for name, grad in analytic.items():
        num = numerical_grad(lambda: float(np.sum(out() * r)), arrays[name], h=h)
        report.errors[name] = relative_error(grad, num)
    return report
