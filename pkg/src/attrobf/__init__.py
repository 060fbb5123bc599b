"""Hide one image attribute with large-epsilon adversarial perturbations while keeping another."""

__version__ = "0.1.0"

from .data import Dataset, SyntheticSpec, generate_synthetic, load_manifest, split, write_manifest
from .evaluate import (CleanModelSpec, MetricsReport, emit_report, evaluate_accuracy, export_image_grid,
                       majority_shares, run_sweep, train_clean_model)
from .model import Architecture, ForkedClassifier, TrainConfig, load_model, multitask_loss, save_model
from .perturb import (AttackConfig, AttributeObfuscator, attack_objective_grad, fgsm, pgd, perturb_dataset,
                      project_linf)
from .rng import Rng

__all__ = [
    "Architecture", "AttackConfig", "AttributeObfuscator", "CleanModelSpec", "Dataset", "ForkedClassifier",
    "MetricsReport", "Rng", "SyntheticSpec", "TrainConfig", "attack_objective_grad", "emit_report",
    "evaluate_accuracy", "export_image_grid", "fgsm", "generate_synthetic", "load_manifest", "load_model",
    "majority_shares", "multitask_loss", "perturb_dataset", "pgd", "project_linf", "run_sweep",
    "save_model", "split", "train_clean_model", "write_manifest",
]
