"""Two-attribute image datasets.

Covers the seeded synthetic generator and manifest directories on disk. UTKFace-style
file names and train/test splits are handled here too.

A manifest directory holds ``manifest.csv`` with header
``id,file,hidden_label,public_label`` and the image files it references
(paths relative to the directory, PNG or binary PPM).
"""

from __future__ import annotations

import colorsys
import csv
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import imageio
from .exceptions import ConfigError, DatasetError
from .rng import Rng

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["id", "file", "hidden_label", "public_label"]


@dataclass
class Dataset:
    """Images in [0, 1] (float32, NCHW) with paired hidden/public labels."""

    images: np.ndarray
    hidden: np.ndarray
    public: np.ndarray
    ids: list
    n_hidden_classes: int = 5
    n_public_classes: int = 2
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.hidden = np.asarray(self.hidden, dtype=np.int64).reshape(-1)
        self.public = np.asarray(self.public, dtype=np.int64).reshape(-1)
        self.ids = [str(i) for i in self.ids]
        n = len(self.ids)
        if self.images.ndim != 4 and not (n == 0 and self.images.size == 0):
            raise DatasetError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != n or len(self.hidden) != n or len(self.public) != n:
            raise DatasetError(
                f"length mismatch: {len(self.images)} images, {len(self.hidden)} hidden labels, "
                f"{len(self.public)} public labels, {n} ids")
        if n:
            if not np.all(np.isfinite(self.images)) or self.images.min() < 0 or self.images.max() > 1:
                raise DatasetError("pixel values must be finite and lie in [0, 1]")
            for lab, k, name in ((self.hidden, self.n_hidden_classes, "hidden"),
                                 (self.public, self.n_public_classes, "public")):
                bad = np.flatnonzero((lab < 0) | (lab >= k))
                if bad.size:
                    raise DatasetError(f"{name} label {lab[bad[0]]} of sample {self.ids[bad[0]]} outside [0, {k})")

    def __len__(self):
        return len(self.ids)

    @property
    def labels(self):
        """(N, 2) array of ``(hidden, public)`` pairs, the estimator ``Y`` format."""
        return np.column_stack([self.hidden, self.public]) if len(self) else np.zeros((0, 2), np.int64)

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.hidden[index], self.public[index],
                       [self.ids[i] for i in index], self.n_hidden_classes, self.n_public_classes)

    def with_images(self, images):
        """Same ids and labels, new pixels."""
        return Dataset(images, self.hidden.copy(), self.public.copy(), list(self.ids),
                       self.n_hidden_classes, self.n_public_classes, dict(self.info))

    @classmethod
    def empty(cls, image_size=32, n_hidden_classes=5, n_public_classes=2):
        return cls(np.zeros((0, 3, image_size, image_size), np.float32), np.zeros(0), np.zeros(0), [],
                   n_hidden_classes, n_public_classes)


@dataclass
class SyntheticSpec:
    """Synthetic stand-in for a face dataset.

    Hidden label: hue family (centers 0, 72, 144, 216, 288 degrees, +-15 jitter).
    Public label: shape (0 = disc, 1 = square).
    """

    n: int = 1000
    k_hidden: int = 5
    k_public: int = 2
    image_size: int = 32
    noise_sigma: float = 0.05
    jitter: int = 4
    seed: int = 0
    hue_jitter: float = 15.0
    saturation: float = 0.8
    value: float = 0.9
    background: float = 0.5
    disc_radius: float = 9.0
    square_half: float = 8.0


def _hsv_to_rgb(hue_deg, s, v):
    return np.array([colorsys.hsv_to_rgb((h % 360.0) / 360.0, s, v) for h in hue_deg]).reshape(-1, 3)


def generate_synthetic(spec):
    """Render ``spec.n`` labeled images, deterministic in ``spec.seed``.

    Each image is a mid-grey canvas with one anti-aliased disc or square at a
    jittered position, filled with a color from the hidden label's hue family,
    plus clamped Gaussian pixel noise.
    """
    if spec.n < 0:
        raise ConfigError(f"n must be >= 0, got {spec.n}")
    if spec.k_public != 2:
        raise ConfigError("the synthetic generator renders exactly two shapes")
    n, size = spec.n, spec.image_size
    if n == 0:
        return Dataset.empty(size, spec.k_hidden, spec.k_public)
    rng = Rng(spec.seed)
    hidden = rng.integers(0, spec.k_hidden, n)
    public = rng.integers(0, spec.k_public, n)
    hue = hidden * (360.0 / spec.k_hidden) + rng.uniform(-spec.hue_jitter, spec.hue_jitter, n)
    offset = rng.integers(-spec.jitter, spec.jitter + 1, (n, 2)).astype(np.float64)
    noise = rng.normal((n, 3, size, size)) * spec.noise_sigma

    centers = np.arange(size) + 0.5
    cy = size / 2 + offset[:, 0, None, None]
    cx = size / 2 + offset[:, 1, None, None]
    dy = centers[None, :, None] - cy
    dx = centers[None, None, :] - cx
    disc = np.clip(spec.disc_radius - np.sqrt(dx ** 2 + dy ** 2) + 0.5, 0.0, 1.0)
    square = (np.clip(spec.square_half - np.abs(dx) + 0.5, 0.0, 1.0)
              * np.clip(spec.square_half - np.abs(dy) + 0.5, 0.0, 1.0))
    coverage = np.where(public[:, None, None] == 0, disc, square)[:, None]

    color = _hsv_to_rgb(hue, spec.saturation, spec.value)[:, :, None, None]
    img = spec.background * (1.0 - coverage) + color * coverage + noise
    images = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Dataset(images, hidden, public, [f"{i:06d}" for i in range(n)], spec.k_hidden, spec.k_public,
                   {"source": "synthetic", "seed": spec.seed})


def write_manifest(dataset, directory, image_format="png"):
    """Write images and ``manifest.csv`` into ``directory`` (created if needed)."""
    if image_format not in ("png", "ppm"):
        raise ValueError(f"image_format must be 'png' or 'ppm', got {image_format!r}")
    os.makedirs(directory, exist_ok=True)
    rows = []
    for i, ident in enumerate(dataset.ids):
        fname = f"{ident}.{image_format}"
        imageio.write_image(os.path.join(directory, fname), dataset.images[i])
        rows.append([ident, fname, int(dataset.hidden[i]), int(dataset.public[i])])
    with open(os.path.join(directory, MANIFEST_NAME), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return os.path.join(directory, MANIFEST_NAME)


def _parse_label(value, k, row, name):
    try:
        v = int(value)
    except ValueError:
        raise DatasetError(f"{name} {value!r} is not an integer", row) from None
    if not 0 <= v < k:
        raise DatasetError(f"{name} {v} outside [0, {k})", row)
    return v


def load_manifest(directory, n_hidden_classes=5, n_public_classes=2, image_size=32):
    """Load a manifest directory written by :func:`write_manifest` (or by hand).

    Raises
    ------
    FileNotFoundError
        If ``manifest.csv`` is missing.
    DatasetError
        A bad image file or an out-of-range label. The message names the
        1-based data row.
    """
    path = os.path.join(directory, MANIFEST_NAME) if os.path.isdir(directory) else directory
    directory = os.path.dirname(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DatasetError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = [r for r in reader if r]
    images, hidden, public, ids = [], [], [], []
    for row_no, r in enumerate(rows, start=1):
        if len(r) != 4:
            raise DatasetError(f"expected 4 fields, got {len(r)}", row_no)
        ident, fname, h, p = r
        hidden.append(_parse_label(h, n_hidden_classes, row_no, "hidden_label"))
        public.append(_parse_label(p, n_public_classes, row_no, "public_label"))
        fpath = os.path.join(directory, fname)
        if not os.path.isfile(fpath):
            raise DatasetError(f"image file {fname!r} does not exist", row_no)
        try:
            img = imageio.read_image(fpath)
        except DatasetError as e:
            raise DatasetError(str(e), row_no) from None
        if img.shape != (3, image_size, image_size):
            raise DatasetError(f"{fname} decodes to shape {img.shape}, expected (3, {image_size}, {image_size})", row_no)
        images.append(img)
        ids.append(ident)
    if not ids:
        return Dataset.empty(image_size, n_hidden_classes, n_public_classes)
    return Dataset(np.stack(images), hidden, public, ids, n_hidden_classes, n_public_classes,
                   {"source": path})


UTK_FIELDS = ("age", "gender", "race")
UTK_CLASSES = {"age": 5, "gender": 2, "race": 5}
AGE_BINS = (12, 25, 40, 60)  # inclusive upper edges of buckets 0..3; 61+ is bucket 4
_UTK_NAME = re.compile(r"^(\d+)_(\d+)_(\d+)_[^/\\]*\.(png|ppm)$", re.IGNORECASE)


def age_bucket(age):
    """0-12, 13-25, 26-40, 41-60, 61+ -> 0..4."""
    return int(np.searchsorted(AGE_BINS, age, side="left"))


def parse_utk_name(name):
    """``(age, gender, race)`` from ``A_G_R_rest.png``, or None if malformed."""
    m = _UTK_NAME.match(name)
    if not m:
        return None
    age, gender, race = (int(g) for g in m.groups()[:3])
    if gender >= UTK_CLASSES["gender"] or race >= UTK_CLASSES["race"]:
        return None
    return age, gender, race


def ingest_utk_names(directory, hidden_field="race", public_field="gender", image_size=32):
    """Build a dataset from UTKFace-style file names in ``directory``.

    Files must already be 32x32 PNG/PPM. Malformed names are skipped and
    counted in ``dataset.info["skipped"]``.
    """
    for f in (hidden_field, public_field):
        if f not in UTK_FIELDS:
            raise ConfigError(f"unknown UTK field {f!r}; expected one of {UTK_FIELDS}")
    if hidden_field == public_field:
        raise ConfigError("hidden_field and public_field must differ")
    images, hidden, public, ids = [], [], [], []
    skipped = 0
    for name in sorted(os.listdir(directory)):
        parsed = parse_utk_name(name)
        if parsed is None:
            skipped += 1
            continue
        values = dict(zip(UTK_FIELDS, parsed))
        values["age"] = age_bucket(values["age"])
        img = imageio.read_image(os.path.join(directory, name))
        if img.shape != (3, image_size, image_size):
            raise DatasetError(f"{name} decodes to shape {img.shape}; resize to {image_size}x{image_size} first")
        images.append(img)
        hidden.append(values[hidden_field])
        public.append(values[public_field])
        ids.append(os.path.splitext(name)[0])
    if skipped:
        logger.warning("skipped %d file(s) with malformed UTK names in %s", skipped, directory)
    if not ids:
        raise DatasetError(f"no parseable UTK file names in {directory} ({skipped} skipped)")
    return Dataset(np.stack(images), hidden, public, ids, UTK_CLASSES[hidden_field],
                   UTK_CLASSES[public_field], {"source": directory, "skipped": skipped})


def split(dataset, fraction, seed):
    """Seeded shuffled split into ``(first, second)`` of sizes ``round(fraction * n)`` and the rest.

    Each part keeps the original sample order.
    """
    if not 0 < fraction < 1:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    k = int(round(fraction * n))
    if k == 0 or k == n:
        raise ConfigError(f"split of {n} samples at fraction {fraction} leaves one side empty")
    perm = Rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:k])), dataset.subset(np.sort(perm[k:]))
