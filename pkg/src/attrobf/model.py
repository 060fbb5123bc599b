"""Forked classifier: one VGG-style trunk feeding a hidden-attribute head and a public-attribute head.

Topology (defaults)::

    input 3x32x32
      -> trunk: 3 x [conv3x3 -> relu -> conv3x3 -> relu -> maxpool2x2], widths 16/32/64
      -> hidden head: flatten -> dense 128 -> relu -> dense K_h
      -> public head: [conv3x3 -> relu -> conv3x3 -> relu -> maxpool2x2] (128)
                      -> flatten -> dense 128 -> relu -> dense K_p

Both heads read the same trunk output. ``ForkedClassifier`` wraps the
functional core below in a scikit-learn estimator; labels are passed as an
(N, 2) array of ``(hidden, public)`` pairs.
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import layers
from ._validation import check_images, check_label_pairs
from .exceptions import (BadMagicError, ChecksumError, ConfigError, ModelFormatError,
                         NonFiniteError, VersionMismatchError)
from .optim import sgd_step
from .rng import Rng

logger = logging.getLogger(__name__)

MAGIC = b"FOB1"
FORMAT_VERSION = 1
PREDICT_CHUNK = 250
# pixels are shifted to [-0.5, 0.5] before the first convolution
INPUT_CENTER = 0.5


@dataclass(frozen=True)
class Architecture:
    image_size: int = 32
    in_channels: int = 3
    trunk_widths: tuple = (16, 32, 64)
    public_width: int = 128
    hidden_units: int = 128
    public_units: int = 128
    n_hidden_classes: int = 5
    n_public_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        depth = len(self.trunk_widths) + 1
        if not self.trunk_widths:
            raise ConfigError("trunk needs at least one block")
        if self.image_size % (2 ** depth):
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by 2**{depth} "
                f"for {len(self.trunk_widths)} trunk blocks plus the public block")
        if self.n_hidden_classes < 2 or self.n_public_classes < 2:
            raise ConfigError("each head needs at least 2 classes")

    @property
    def trunk_spatial(self):
        return self.image_size // 2 ** len(self.trunk_widths)

    @property
    def trunk_features(self):
        return self.trunk_widths[-1] * self.trunk_spatial ** 2

    @property
    def public_features(self):
        return self.public_width * (self.trunk_spatial // 2) ** 2

    def layout(self):
        """Ordered ``(name, shape, fan_in)`` for every parameter tensor."""
        out = []
        c = self.in_channels
        for i, w in enumerate(self.trunk_widths):
            for j, cin in enumerate((c, w)):
                out.append((f"trunk{i}.conv{j}.weight", (w, cin, 3, 3), cin * 9))
                out.append((f"trunk{i}.conv{j}.bias", (w,), None))
            c = w
        out += [
            ("hidden.fc0.weight", (self.hidden_units, self.trunk_features), self.trunk_features),
            ("hidden.fc0.bias", (self.hidden_units,), None),
            ("hidden.fc1.weight", (self.n_hidden_classes, self.hidden_units), self.hidden_units),
            ("hidden.fc1.bias", (self.n_hidden_classes,), None),
        ]
        pw = self.public_width
        for j, cin in enumerate((c, pw)):
            out.append((f"public.conv{j}.weight", (pw, cin, 3, 3), cin * 9))
            out.append((f"public.conv{j}.bias", (pw,), None))
        out += [
            ("public.fc0.weight", (self.public_units, self.public_features), self.public_features),
            ("public.fc0.bias", (self.public_units,), None),
            ("public.fc1.weight", (self.n_public_classes, self.public_units), self.public_units),
            ("public.fc1.bias", (self.n_public_classes,), None),
        ]
        return out

    def n_parameters(self):
        return sum(int(np.prod(s)) for _, s, _ in self.layout())


def init_params(arch, rng, dtype=np.float32):
    """He-normal weights with zero biases, drawn in layout order from ``rng``."""
    params = {}
    for name, shape, fan_in in arch.layout():
        if fan_in is None:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = layers.he_normal(rng, shape, fan_in, dtype)
    return params


def _block_forward(h, params, prefix, caches):
    for j in range(2):
        w = params[f"{prefix}.conv{j}.weight"]
        h, c = layers.conv_nhwc_forward(h, layers.kernel_matrix(w), params[f"{prefix}.conv{j}.bias"])
        caches.append(("conv", f"{prefix}.conv{j}", c))
        h, c = layers.relu_forward(h)
        caches.append(("relu", None, c))
    h, c = layers.pool_nhwc_forward(h)
    caches.append(("pool", None, c))
    return h


def _mlp_forward(h, params, prefix, caches):
    h, c = layers.dense_forward(h, params[f"{prefix}.fc0.weight"], params[f"{prefix}.fc0.bias"])
    caches.append(("dense", f"{prefix}.fc0", c))
    h, c = layers.relu_forward(h)
    caches.append(("relu", None, c))
    h, c = layers.dense_forward(h, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"])
    caches.append(("dense", f"{prefix}.fc1", c))
    return h


def _backward_chain(g, caches, grads, need_input_grad=True):
    for i in range(len(caches) - 1, -1, -1):
        kind, name, c = caches[i]
        if kind == "relu":
            g = layers.relu_backward(g, c)
        elif kind == "pool":
            g = layers.pool_nhwc_backward(g, c)
        elif kind == "conv":
            g, gw, gb = layers.conv_nhwc_backward(g, c, need_input_grad or i > 0)
            grads[f"{name}.weight"] = layers.kernel_from_matrix(gw, c[1][3])
            grads[f"{name}.bias"] = gb
        else:
            g, gw, gb = layers.dense_backward(g, c)
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
    return g


def network_forward(params, arch, x):
    """Run both heads on an NCHW batch.

    Returns ``(logits_hidden, logits_public, cache)``. Inputs are centered by
    ``INPUT_CENTER`` first. Feature maps are kept
    channels-last internally, so dense layers see features flattened in
    (H, W, C) order.
    """
    trunk, hid, pub = [], [], []
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1)) - x.dtype.type(INPUT_CENTER)
    for i in range(len(arch.trunk_widths)):
        h = _block_forward(h, params, f"trunk{i}", trunk)
    logits_h = _mlp_forward(h, params, "hidden", hid)
    p = _block_forward(h, params, "public", pub)
    logits_p = _mlp_forward(p, params, "public", pub)
    return logits_h, logits_p, (trunk, hid, pub)


def network_backward(cache, grad_hidden, grad_public, need_input_grad=True):
    """Back-propagate logit gradients.

    Returns ``(param_grads, grad_x)`` with ``grad_x`` in NCHW layout, or None
    when ``need_input_grad`` is false.
    """
    trunk, hid, pub = cache
    grads = {}
    g = _backward_chain(grad_hidden, hid, grads)
    g = g + _backward_chain(grad_public, pub, grads)
    gx = _backward_chain(g, trunk, grads, need_input_grad)
    if gx is not None:
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    return grads, gx


def multitask_loss(logits_h, y_h, logits_p, y_p, alpha1, alpha2, reduction="mean"):
    """Weighted two-task loss ``alpha1 * CE_hidden + alpha2 * CE_public``.

    Returns ``(loss, grad_logits_hidden, grad_logits_public)``.
    """
    if alpha1 < 0 or alpha2 < 0:
        raise ConfigError(f"loss weights must be >= 0, got alpha1={alpha1}, alpha2={alpha2}")
    return _weighted_loss(logits_h, y_h, logits_p, y_p, alpha1, alpha2, reduction)


def _weighted_loss(logits_h, y_h, logits_p, y_p, w_h, w_p, reduction):
    lh, gh = layers.softmax_cross_entropy(logits_h, y_h, reduction)
    lp, gp = layers.softmax_cross_entropy(logits_p, y_p, reduction)
    return w_h * lh + w_p * lp, w_h * gh, w_p * gp


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.005
    momentum: float = 0.9
    alpha1: float = 1.0
    alpha2: float = 1.0
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"need lr >= 0 and 0 <= momentum < 1, got {self.lr}, {self.momentum}")
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha1 + self.alpha2 <= 0:
            raise ConfigError(f"need alpha1, alpha2 >= 0 with positive sum, got {self.alpha1}, {self.alpha2}")
        return self


class ForkedClassifier(ClassifierMixin, BaseEstimator):
    """Two-head image classifier with a shared convolutional trunk.

    Parameters
    ----------
    trunk_widths : tuple of int
        Channel width of each trunk block; the heads fork after the last one.
    public_width : int
        Channel width of the extra conv block on the public head.
    hidden_units, public_units : int
        Width of each head's hidden dense layer.
    n_hidden_classes, n_public_classes : int
    image_size : int
        Square input side; inputs are (N, 3, image_size, image_size) in [0, 1].
    epochs, batch_size, lr, momentum, alpha1, alpha2, seed
        Training settings, see :class:`TrainConfig`.
    dtype : {"float32", "float64"}
        Parameter precision.
    verbose : bool
        Log one line per epoch.

    Attributes
    ----------
    params_ : dict of str -> ndarray
    history_ : list of dict
        Per-epoch mean loss and running train accuracies.
    """

    def __init__(self, trunk_widths=(16, 32, 64), public_width=128, hidden_units=128,
                 public_units=128, n_hidden_classes=5, n_public_classes=2, image_size=32,
                 epochs=10, batch_size=32, lr=0.005, momentum=0.9, alpha1=1.0, alpha2=1.0,
                 seed=0, dtype="float32", verbose=False):
        self.trunk_widths = trunk_widths
        self.public_width = public_width
        self.hidden_units = hidden_units
        self.public_units = public_units
        self.n_hidden_classes = n_hidden_classes
        self.n_public_classes = n_public_classes
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.seed = seed
        self.dtype = dtype
        self.verbose = verbose

    @property
    def architecture(self):
        return Architecture(self.image_size, 3, tuple(self.trunk_widths), self.public_width,
                            self.hidden_units, self.public_units, self.n_hidden_classes,
                            self.n_public_classes)

    def train_config(self):
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum,
                           self.alpha1, self.alpha2, self.seed)

    def initialize(self):
        """Draw initial parameters from ``seed`` without training."""
        self.arch_ = self.architecture
        self.params_ = init_params(self.arch_, Rng(self.seed).spawn(0), np.dtype(self.dtype))
        self.history_ = []
        self.classes_ = [np.arange(self.n_hidden_classes), np.arange(self.n_public_classes)]
        return self

    def fit(self, X, Y):
        """Train both heads with mini-batch SGD on the weighted loss.

        Raises
        ------
        NonFiniteError
            If the loss becomes NaN/inf; the message names the epoch and batch.
        """
        cfg = self.train_config().validate()
        X = check_images(X, self.image_size, dtype=np.dtype(self.dtype))
        Y = check_label_pairs(Y, len(X), self.n_hidden_classes, self.n_public_classes)
        if len(X) == 0:
            raise ValueError("cannot fit on an empty dataset")
        self.initialize()
        names = list(self.params_)
        plist = [self.params_[k] for k in names]
        velocity = None
        n = len(X)
        for epoch in range(cfg.epochs):
            order = Rng(cfg.seed).spawn(1 + epoch).permutation(n)
            tot_loss, hit_h, hit_p = 0.0, 0, 0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                xb, yh, yp = X[idx], Y[idx, 0], Y[idx, 1]
                lh, lp, cache = network_forward(self.params_, self.arch_, xb)
                loss, gh, gp = _weighted_loss(lh, yh, lp, yp, cfg.alpha1, cfg.alpha2, "mean")
                if not np.isfinite(loss):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
                grads, _ = network_backward(cache, gh.astype(lh.dtype), gp.astype(lp.dtype),
                                            need_input_grad=False)
                velocity = sgd_step(plist, [grads[k] for k in names], cfg.lr, cfg.momentum,
                                    velocity, names)
                tot_loss += loss * len(idx)
                hit_h += int(np.sum(argmax_classes(lh) == yh))
                hit_p += int(np.sum(argmax_classes(lp) == yp))
            if not self.parameters_finite():
                # the last update can overflow even when every loss so far was finite
                raise NonFiniteError(f"non-finite parameters after epoch {epoch}")
            rec = {"epoch": epoch, "loss": tot_loss / n, "hidden_acc": hit_h / n, "public_acc": hit_p / n}
            self.history_.append(rec)
            if self.verbose:
                logger.info("epoch %d loss %.4f hidden_acc %.4f public_acc %.4f",
                            epoch, rec["loss"], rec["hidden_acc"], rec["public_acc"])
        return self

    def decision_function(self, X):
        """Logits of both heads: ``(logits_hidden, logits_public)``."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.image_size, dtype=self._param_dtype())
        out_h, out_p = [], []
        for start in range(0, len(X), PREDICT_CHUNK):
            lh, lp, _ = network_forward(self.params_, self.arch_, X[start:start + PREDICT_CHUNK])
            out_h.append(lh)
            out_p.append(lp)
        if not out_h:
            dt = self._param_dtype()
            return np.zeros((0, self.n_hidden_classes), dt), np.zeros((0, self.n_public_classes), dt)
        return np.concatenate(out_h), np.concatenate(out_p)

    def predict(self, X):
        """(N, 2) array of ``(hidden, public)`` argmax classes; ties go to the lowest index."""
        lh, lp = self.decision_function(X)
        return np.column_stack([argmax_classes(lh), argmax_classes(lp)])

    def score(self, X, Y, sample_weight=None):
        """Mean of the hidden-head and public-head accuracies."""
        Y = np.asarray(Y)
        P = self.predict(X)
        return float(np.mean(P == Y))

    def weighted_input_gradient(self, X, y_hidden, y_public, w_hidden, w_public):
        """Per-sample objective ``w_h * CE_h + w_p * CE_p`` and its gradient w.r.t. ``X``.

        Weights may be negative. Returns ``(objective (N,), grad_x)``.
        """
        check_is_fitted(self, "params_")
        X = check_images(X, self.image_size, dtype=self._param_dtype(), check_range=False)
        lh, lp, cache = network_forward(self.params_, self.arch_, X)
        ch, gh = layers.softmax_cross_entropy(lh, y_hidden, "none")
        cp, gp = layers.softmax_cross_entropy(lp, y_public, "none")
        dt = lh.dtype
        _, gx = network_backward(cache, (w_hidden * gh).astype(dt), (w_public * gp).astype(dt))
        return w_hidden * ch + w_public * cp, gx

    def astype(self, dtype):
        """Copy with parameters cast to ``dtype``."""
        check_is_fitted(self, "params_")
        other = ForkedClassifier(**{**self.get_params(), "dtype": np.dtype(dtype).name})
        other.arch_ = self.arch_
        other.params_ = {k: v.astype(dtype) for k, v in self.params_.items()}
        other.history_ = list(self.history_)
        other.classes_ = self.classes_
        return other

    def parameters_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params_.values())

    def _param_dtype(self):
        return next(iter(self.params_.values())).dtype

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        tags.target_tags.single_output = False
        tags.target_tags.two_d_labels = True
        tags.input_tags.two_d_array = False
        tags.input_tags.three_d_array = True
        return tags


def argmax_classes(logits):
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=-1)


def forward(model, x):
    """``(logits_hidden, logits_public)`` for a batch of images."""
    return model.decision_function(x)


def predict(model, x):
    return model.predict(x)


def _checksum(payload):
    return hashlib.blake2b(payload, digest_size=8).digest()


def save_model(model, path):
    """Write ``model`` in the FOB1 binary format.

    Layout (little-endian): magic ``FOB1``; uint32 version; uint32 image_size,
    in_channels, n_trunk_blocks, each trunk width, public_width, hidden_units,
    public_units, n_hidden_classes, n_public_classes; all parameter tensors as
    float32 in layout order; 8-byte BLAKE2b checksum of every preceding byte.
    """
    check_is_fitted(model, "params_")
    arch = model.arch_
    buf = io.BytesIO()
    buf.write(MAGIC)
    fields = [FORMAT_VERSION, arch.image_size, arch.in_channels, len(arch.trunk_widths),
              *arch.trunk_widths, arch.public_width, arch.hidden_units, arch.public_units,
              arch.n_hidden_classes, arch.n_public_classes]
    buf.write(struct.pack(f"<{len(fields)}I", *fields))
    for name, shape, _ in arch.layout():
        buf.write(np.ascontiguousarray(model.params_[name], dtype="<f4").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(payload + _checksum(payload))


def load_model(path, **estimator_params):
    """Read a FOB1 file; extra keyword arguments become estimator parameters.

    Raises ``BadMagicError``, ``VersionMismatchError`` or ``ChecksumError``
    (in that order of checking).
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise ChecksumError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 16 or _checksum(data[:-8]) != data[-8:]:
        raise ChecksumError(f"{path}: checksum mismatch (file corrupt or truncated)")
    payload = data[:-8]
    try:
        off = 8
        image_size, in_channels, depth = struct.unpack_from("<3I", payload, off)
        off += 12
        widths = struct.unpack_from(f"<{depth}I", payload, off)
        off += 4 * depth
        pw, hu, pu, kh, kp = struct.unpack_from("<5I", payload, off)
        off += 20
        arch = Architecture(image_size, in_channels, widths, pw, hu, pu, kh, kp)
    except (struct.error, ConfigError) as e:
        raise ModelFormatError(f"{path}: bad architecture descriptor: {e}") from None
    if in_channels != 3:
        raise ModelFormatError(f"{path}: only 3-channel models are supported")
    params = {}
    for name, shape, _ in arch.layout():
        count = int(np.prod(shape))
        if off + 4 * count > len(payload):
            raise ModelFormatError(f"{path}: payload too short for {name}")
        params[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)
        off += 4 * count
    if off != len(payload):
        raise ModelFormatError(f"{path}: {len(payload) - off} trailing bytes after parameters")
    model = ForkedClassifier(trunk_widths=arch.trunk_widths, public_width=pw, hidden_units=hu,
                             public_units=pu, n_hidden_classes=kh, n_public_classes=kp,
                             image_size=image_size, **estimator_params)
    model.arch_ = arch
    model.params_ = params
    model.history_ = []
    model.classes_ = [np.arange(kh), np.arange(kp)]
    return model
