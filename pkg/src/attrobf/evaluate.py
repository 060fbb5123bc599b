"""Scoring perturbed data with clean models, plus the sweep driver and its reports.

Clean models are trained on unperturbed data and never see the surrogate's
parameters or seed. A sweep perturbs the test set once per ``(method, epsilon)``
cell using the surrogate, then scores every clean model on the result.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import imageio
from .exceptions import ConfigError
from .model import ForkedClassifier, TrainConfig
from .perturb import AttackConfig, check_perturbation, perturb_dataset

logger = logging.getLogger(__name__)

VARIANT_WIDTHS = {"A": (16, 32, 64), "B": (16, 32, 64, 128)}

REPORT_COLUMNS = ["method", "epsilon", "alpha1", "alpha2", "clean_variant", "hidden_acc", "public_acc",
                  "baseline_hidden_acc", "baseline_public_acc", "majority_pred_share",
                  "gt_majority_share", "n"]


@dataclass
class CleanModelSpec:
    """A clean evaluation model: variant A (3 trunk blocks) or B (4 trunk blocks)."""

    variant: str = "A"
    seed: int = 2

    def __post_init__(self):
        self.variant = str(self.variant).upper()
        if self.variant not in VARIANT_WIDTHS:
            raise ConfigError(f"unknown clean variant {self.variant!r}; expected A or B")


def build_model(trunk_widths, train_cfg, n_hidden_classes=5, n_public_classes=2, image_size=32,
                verbose=False):
    return ForkedClassifier(trunk_widths=tuple(trunk_widths), n_hidden_classes=n_hidden_classes,
                            n_public_classes=n_public_classes, image_size=image_size,
                            epochs=train_cfg.epochs, batch_size=train_cfg.batch_size, lr=train_cfg.lr,
                            momentum=train_cfg.momentum, alpha1=train_cfg.alpha1,
                            alpha2=train_cfg.alpha2, seed=train_cfg.seed, verbose=verbose)


def train_clean_model(spec, train_set, train_cfg=None, surrogate_seed=None, verbose=False):
    """Train a clean forked classifier on unperturbed data.

    ``train_cfg.seed`` is replaced by ``spec.seed``; it must differ from
    ``surrogate_seed``.
    """
    if surrogate_seed is not None and spec.seed == surrogate_seed:
        raise ConfigError(f"clean model seed {spec.seed} equals the surrogate seed")
    cfg = TrainConfig(**{**asdict(train_cfg or TrainConfig()), "seed": spec.seed})
    model = build_model(VARIANT_WIDTHS[spec.variant], cfg, train_set.n_hidden_classes,
                        train_set.n_public_classes, train_set.images.shape[-1], verbose)
    return model.fit(train_set.images, train_set.labels)


def evaluate_accuracy(model, dataset):
    """``(hidden_accuracy, public_accuracy)`` of exact argmax matches."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    pred = model.predict(dataset.images)
    return float(np.mean(pred[:, 0] == dataset.hidden)), float(np.mean(pred[:, 1] == dataset.public))


def majority_share(labels):
    """Share of the modal value (ties resolved toward the lowest class)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("majority share of an empty sequence")
    counts = np.bincount(labels)
    return float(counts.max() / labels.size)


def majority_shares(predictions, ground_truth):
    """``(majority_prediction_share, ground_truth_majority_share)``."""
    predictions = np.asarray(predictions)
    ground_truth = np.asarray(ground_truth)
    if predictions.size == 0 or ground_truth.size == 0:
        raise ValueError("majority shares need nonempty inputs")
    if predictions.shape != ground_truth.shape:
        raise ValueError(f"predictions shape {predictions.shape} != ground truth shape {ground_truth.shape}")
    return majority_share(predictions), majority_share(ground_truth)


@dataclass
class ReportRow:
    method: str
    epsilon: float
    alpha1: float
    alpha2: float
    clean_variant: str
    hidden_acc: float = math.nan
    public_acc: float = math.nan
    baseline_hidden_acc: float = math.nan
    baseline_public_acc: float = math.nan
    majority_pred_share: float = math.nan
    gt_majority_share: float = math.nan
    n: int = 0
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def row(self, method, epsilon, variant):
        for r in self.rows:
            if r.method == method and r.epsilon == epsilon and r.clean_variant == variant:
                return r
        raise KeyError((method, epsilon, variant))

    def to_dict(self):
        return {"config": self.config, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d):
        return cls([ReportRow(**r) for r in d["rows"]], d.get("config", {}))


def parse_grid(spec, alpha1=1.0, alpha2=1.0):
    """Parse ``"pgd:0.2:1:1,fgsm:0.3:1:1e-5"`` into ``(method, eps, alpha1, alpha2)`` tuples.

    The alpha fields are optional and default to the given values.
    """
    cells = []
    for item in filter(None, (s.strip() for s in str(spec).split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 4):
            raise ConfigError(f"grid entry {item!r} must be method:epsilon[:alpha1:alpha2]")
        try:
            eps = float(parts[1])
            a1, a2 = (float(parts[2]), float(parts[3])) if len(parts) == 4 else (alpha1, alpha2)
        except ValueError:
            raise ConfigError(f"grid entry {item!r} has a non-numeric field") from None
        cells.append((parts[0].lower(), eps, a1, a2))
    if not cells:
        raise ConfigError("attack grid is empty")
    return cells


DEFAULT_GRID = "pgd:0.2:1:1,fgsm:0.3:1:1e-5,fgsm:0.4:1:1e-5,fgsm:0.5:1:1e-5"


def run_sweep(surrogate, clean_models, test_set, grid, steps=40, step_size=None, config=None,
              on_perturbed=None):
    """Evaluate clean models on test data perturbed against ``surrogate``.

    Parameters
    ----------
    surrogate : ForkedClassifier
    clean_models : dict of variant name -> ForkedClassifier
    test_set : Dataset
    grid : list of (method, epsilon, alpha1, alpha2)
    on_perturbed : callable, optional
        Called as ``on_perturbed(cfg, perturbed_dataset)`` for every cell that
        was perturbed successfully (used to save images).

    Returns
    -------
    MetricsReport
        One row per ``(method, epsilon, variant)``, ordered by grid entry and
        then variant name. A failing cell is recorded with ``error`` set and
        does not stop the sweep.
    """
    if not grid:
        raise ConfigError("attack grid is empty")
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    variants = sorted(clean_models)
    baselines = {v: evaluate_accuracy(clean_models[v], test_set) for v in variants}
    gt_share = majority_share(test_set.hidden)
    rows = []
    for method, eps, a1, a2 in grid:
        try:
            cfg = AttackConfig(method, eps, steps, step_size, a1, a2).validate()
            perturbed, _ = perturb_dataset(surrogate, test_set, cfg)
            bad = check_perturbation(test_set.images, perturbed.images, eps)
            if bad:
                raise RuntimeError(f"{bad} constraint violations in perturbed images")
        except Exception as e:  # noqa: BLE001 - recorded in the report row
            logger.error("sweep cell %s@%s failed: %s", method, eps, e)
            rows += [ReportRow(method, eps, a1, a2, v, error=f"{type(e).__name__}: {e}") for v in variants]
            continue
        if on_perturbed is not None:
            on_perturbed(cfg, perturbed)
        for v in variants:
            pred = clean_models[v].predict(perturbed.images)
            rows.append(ReportRow(
                method, eps, a1, a2, v,
                hidden_acc=float(np.mean(pred[:, 0] == test_set.hidden)),
                public_acc=float(np.mean(pred[:, 1] == test_set.public)),
                baseline_hidden_acc=baselines[v][0],
                baseline_public_acc=baselines[v][1],
                majority_pred_share=majority_share(pred[:, 0]),
                gt_majority_share=gt_share,
                n=len(test_set)))
    cfg_echo = dict(config or {})
    cfg_echo.setdefault("steps", steps)
    cfg_echo.setdefault("step_size", "2.5*epsilon/steps" if step_size is None else step_size)
    cfg_echo.setdefault("evaluation_split", "held-out test set")
    return MetricsReport(rows, cfg_echo)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.rows:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def report_json(report):
    return json.dumps(_json_safe(report.to_dict()), indent=2) + "\n"


def emit_report(report, path, fmt="csv"):
    """Write the report as CSV or JSON; output is byte-stable for equal reports."""
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = report_json(report)
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    with open(path, "w", newline="") as f:
        f.write(text)
    return path


def load_report(path):
    with open(path) as f:
        d = json.load(f)
    for r in d["rows"]:
        for k, v in r.items():
            if v is None and k != "error":
                r[k] = math.nan
    return MetricsReport.from_dict(d)


GRID_SEPARATOR = 2
SEPARATOR_VALUE = 1.0


def image_grid(pairs, columns):
    """Compose a CHW float grid: originals in the top row block, perturbed beneath.

    Cells are separated by ``GRID_SEPARATOR`` white pixels; unused cells are white.
    """
    if not pairs:
        raise ValueError("image grid needs at least one pair")
    if columns < 1:
        raise ValueError(f"columns must be >= 1, got {columns}")
    shape = np.shape(pairs[0][0])
    for i, (a, b) in enumerate(pairs):
        if np.shape(a) != shape or np.shape(b) != shape:
            raise ValueError(f"pair {i} has shapes {np.shape(a)}, {np.shape(b)}; expected {shape}")
    c, h, w = shape
    cols = min(columns, len(pairs))
    block_rows = -(-len(pairs) // cols)
    n_rows = 2 * block_rows
    sep = GRID_SEPARATOR
    grid = np.full((c, n_rows * h + (n_rows - 1) * sep, cols * w + (cols - 1) * sep), SEPARATOR_VALUE,
                   dtype=np.float32)
    for i, (orig, pert) in enumerate(pairs):
        r, col = divmod(i, cols)
        for block, img in ((r, orig), (block_rows + r, pert)):
            y0, x0 = block * (h + sep), col * (w + sep)
            grid[:, y0:y0 + h, x0:x0 + w] = img
    return grid


def export_image_grid(pairs, path, columns=8):
    """Write :func:`image_grid` as an 8-bit PNG."""
    grid = image_grid(pairs, columns)
    imageio.write_png(path, grid)
    return path


def ensure_dir(path):
    if path:
        os.makedirs(path, exist_ok=True)
    return path
