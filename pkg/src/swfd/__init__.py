"""Targeted transfer attacks with salient-region auxiliary images and weighted feature drop."""

from swfd.attack import AttackConfig, run_dtmi_baseline, run_swfd_attack
from swfd.data import AdversarialResult, LabeledExample, load_dataset
from swfd.evaluation import deep_layer_distribution, evaluate_tasr, run_experiment_grid
from swfd.models import ClassifierHandle, load_model
from swfd.wfd import WfdParams, apply_wfd

__all__ = [
    "AdversarialResult",
    "AttackConfig",
    "ClassifierHandle",
    "LabeledExample",
    "WfdParams",
    "apply_wfd",
    "deep_layer_distribution",
    "evaluate_tasr",
    "load_dataset",
    "load_model",
    "run_dtmi_baseline",
    "run_experiment_grid",
    "run_swfd_attack",
]

__version__ = "0.1.0"
