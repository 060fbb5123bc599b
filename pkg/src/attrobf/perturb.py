"""Large-epsilon FGSM / PGD obfuscation in pixel space.

The attack ascends ``J = alpha1 * CE_hidden - alpha2 * CE_public`` of a trained
surrogate :class:`~attrobf.model.ForkedClassifier`: it drives the hidden head
away from the true hidden label while penalizing damage to the public head.
Every output stays inside the l-infinity ball of radius ``epsilon`` around the
original image and inside the pixel range.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_label_pairs
from .exceptions import ConfigError, NonFiniteError, ShapeError
from .model import ForkedClassifier

logger = logging.getLogger(__name__)

METHODS = ("fgsm", "pgd")
CHUNK = 100


@dataclass
class AttackConfig:
    """Attack settings. ``step_size=None`` means ``2.5 * epsilon / steps``."""

    method: str = "pgd"
    epsilon: float = 0.2
    steps: int = 40
    step_size: float | None = None
    alpha1: float = 1.0
    alpha2: float = 1.0
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        self.method = str(self.method).lower()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if not (0 < self.epsilon <= 1):
            raise ConfigError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError(f"alpha1/alpha2 must be >= 0, got {self.alpha1}, {self.alpha2}")
        if self.clip_min >= self.clip_max:
            raise ConfigError(f"clip_min {self.clip_min} must be below clip_max {self.clip_max}")
        if self.method == "pgd":
            if self.steps < 1:
                raise ConfigError(f"PGD needs steps >= 1, got {self.steps}")
            if self.step_size is not None and self.step_size < 0:
                raise ConfigError(f"step_size must be >= 0, got {self.step_size}")
        return self

    @property
    def effective_step_size(self):
        if self.step_size is None:
            return 2.5 * self.epsilon / self.steps
        return self.step_size

    def to_dict(self):
        d = asdict(self)
        if self.method == "pgd":
            d["step_size"] = self.effective_step_size
        return d


@dataclass
class PerturbedSample:
    """Original and perturbed batch plus per-sample objective values.

    ``trace`` has shape (steps + 1, N) for PGD (objective at every iterate,
    including the start and the final image) and (2, N) for FGSM.
    """

    original: np.ndarray
    perturbed: np.ndarray
    trace: np.ndarray = field(default=None)


def project_linf(candidate, origin, epsilon, clip_min=0.0, clip_max=1.0):
    """Clamp ``candidate`` into ``[origin - eps, origin + eps]`` and then into the pixel range."""
    candidate = np.asarray(candidate)
    origin = np.asarray(origin)
    if candidate.shape != origin.shape:
        raise ShapeError(f"candidate shape {candidate.shape} != origin shape {origin.shape}")
    out = np.clip(candidate, origin - epsilon, origin + epsilon)
    return np.clip(out, clip_min, clip_max).astype(candidate.dtype, copy=False)


def attack_objective_grad(model, x, y_hidden, y_public, alpha1, alpha2):
    """Per-sample ``J = alpha1 * CE_hidden - alpha2 * CE_public`` and ``dJ/dx``.

    Returns ``(J, grad_x)``; ``J`` has shape (N,). Samples do not interact, so
    row ``i`` of ``grad_x`` is the gradient of ``J[i]`` alone.
    """
    check_is_fitted(model, "params_")
    if not model.parameters_finite():
        raise NonFiniteError("surrogate model has non-finite parameters")
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    yh = np.atleast_1d(y_hidden)
    yp = np.atleast_1d(y_public)
    j, g = model.weighted_input_gradient(xb, yh, yp, alpha1, -alpha2)
    if single:
        return float(j[0]), g[0]
    return j, g


def _objective(model, x, yh, yp, cfg):
    j, _ = model.weighted_input_gradient(x, yh, yp, cfg.alpha1, -cfg.alpha2)
    return j


def fgsm(model, x, y_hidden, y_public, cfg):
    """One step ``clip(x + eps * sign(dJ/dx))``."""
    cfg.validate()
    x = check_images(x, model.image_size, dtype=model._param_dtype())
    yh, yp = np.atleast_1d(y_hidden), np.atleast_1d(y_public)
    j0, g = attack_objective_grad(model, x, yh, yp, cfg.alpha1, cfg.alpha2)
    step = np.sign(g).astype(x.dtype) * x.dtype.type(cfg.epsilon)
    adv = project_linf(x + step, x, cfg.epsilon, cfg.clip_min, cfg.clip_max)
    trace = np.stack([j0, _objective(model, adv, yh, yp, cfg)])
    return PerturbedSample(x, adv, trace)


def pgd(model, x, y_hidden, y_public, cfg):
    """``steps`` iterations of sign ascent, each projected onto the ball and range.

    Starts at ``x`` itself (no random start).
    """
    cfg.validate()
    if cfg.method != "pgd":
        raise ConfigError("pgd() called with a non-PGD config")
    x = check_images(x, model.image_size, dtype=model._param_dtype())
    yh, yp = np.atleast_1d(y_hidden), np.atleast_1d(y_public)
    eta = x.dtype.type(cfg.effective_step_size)
    adv = x.copy()
    trace = []
    for _ in range(cfg.steps):
        j, g = attack_objective_grad(model, adv, yh, yp, cfg.alpha1, cfg.alpha2)
        trace.append(j)
        if eta == 0:
            continue
        adv = project_linf(adv + eta * np.sign(g).astype(x.dtype), x, cfg.epsilon,
                           cfg.clip_min, cfg.clip_max)
    trace.append(_objective(model, adv, yh, yp, cfg))
    return PerturbedSample(x, adv, np.stack(trace))


def perturb(model, x, y_hidden, y_public, cfg):
    """Dispatch on ``cfg.method``."""
    cfg.validate()
    if cfg.method == "fgsm":
        return fgsm(model, x, y_hidden, y_public, cfg)
    return pgd(model, x, y_hidden, y_public, cfg)


def perturb_dataset(model, dataset, cfg):
    """Perturb every sample of a :class:`~attrobf.data.Dataset`.

    Samples are processed in fixed-size chunks in input order, so the result
    does not depend on how the work is scheduled.

    Returns
    -------
    perturbed : Dataset
        Same ids and labels, perturbed pixels.
    diagnostics : dict
        Per-sample ``linf`` distance and initial/final objective values.
    """
    cfg.validate()
    n = len(dataset)
    expected = (3, model.image_size, model.image_size)
    for i in range(n):
        if dataset.images[i].shape != expected:
            raise ShapeError(f"sample {i} has shape {dataset.images[i].shape}, model expects {expected}")
    out = np.empty_like(dataset.images)
    j_start = np.zeros(n)
    j_end = np.zeros(n)
    for s in range(0, n, CHUNK):
        sl = slice(s, min(n, s + CHUNK))
        res = perturb(model, dataset.images[sl], dataset.hidden[sl], dataset.public[sl], cfg)
        out[sl] = res.perturbed
        j_start[sl] = res.trace[0]
        j_end[sl] = res.trace[-1]
    linf = np.abs(out - dataset.images).reshape(n, -1).max(axis=1) if n else np.zeros(0)
    diag = {"linf": linf, "objective_start": j_start, "objective_end": j_end}
    return dataset.with_images(out), diag


def check_perturbation(original, perturbed, epsilon, clip_min=0.0, clip_max=1.0, tol=1e-6):
    """Number of elements violating the ball or range constraint."""
    d = np.abs(np.asarray(perturbed, np.float64) - np.asarray(original, np.float64))
    ball = int(np.sum(d > epsilon + tol))
    rng = int(np.sum((perturbed < clip_min - tol) | (perturbed > clip_max + tol)))
    return ball + rng


class AttributeObfuscator(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer that hides the hidden attribute of images.

    ``fit`` trains a surrogate :class:`ForkedClassifier` (unless ``surrogate``
    is an already fitted one); ``transform`` perturbs images against it.

    Parameters
    ----------
    surrogate : ForkedClassifier or None
        Model whose gradients drive the attack. A fresh default model is used
        when None.
    method, epsilon, steps, step_size, alpha1, alpha2
        See :class:`AttackConfig`.
    refit_surrogate : bool
        Train ``surrogate`` in ``fit`` even if it is already fitted.
    """

    def __init__(self, surrogate=None, method="pgd", epsilon=0.2, steps=40, step_size=None,
                 alpha1=1.0, alpha2=1.0, refit_surrogate=False):
        self.surrogate = surrogate
        self.method = method
        self.epsilon = epsilon
        self.steps = steps
        self.step_size = step_size
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.refit_surrogate = refit_surrogate

    def attack_config(self):
        return AttackConfig(self.method, self.epsilon, self.steps, self.step_size,
                            self.alpha1, self.alpha2).validate()

    def fit(self, X, Y):
        self.attack_config()
        model = self.surrogate if self.surrogate is not None else ForkedClassifier()
        if self.refit_surrogate or not hasattr(model, "params_"):
            model.fit(X, Y)
        self.surrogate_ = model
        return self

    def transform(self, X, Y=None):
        """Perturbed copy of ``X``.

        Without ``Y`` the surrogate's own predictions stand in for the labels.
        """
        check_is_fitted(self, "surrogate_")
        m = self.surrogate_
        X = check_images(X, m.image_size, dtype=m._param_dtype())
        if Y is None:
            Y = m.predict(X)
        Y = check_label_pairs(Y, len(X), m.n_hidden_classes, m.n_public_classes)
        cfg = self.attack_config()
        out = np.empty_like(X)
        for s in range(0, len(X), CHUNK):
            sl = slice(s, s + CHUNK)
            out[sl] = perturb(m, X[sl], Y[sl, 0], Y[sl, 1], cfg).perturbed
        return out

    def fit_transform(self, X, Y=None, **fit_params):
        return self.fit(X, Y).transform(X, Y)
