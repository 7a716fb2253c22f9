"""Epistemic neural networks with desk-scale distribution-shift benchmarks.

Builds epinets (frozen base net plus learnable and fixed-prior
index-conditioned corrections) and deep ensembles on a small from-scratch
autodiff core, generates procedural shifted evaluation suites (corruption
grid, OOD split, adversarially filtered split), and evaluates marginal
and joint predictive quality, calibration, robustness aggregates, and
temperature-transfer behavior.
"""

from .data import (CORRUPTION_TYPES, SEVERITIES, SEVERITY_TABLES, ImageDataset, ShiftSuite,
                   corrupt, generate_dataset, load_idx, load_suite, make_adversarial_split,
                   make_ood_split, write_suite)
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .enn import (DiscreteReference, EnnModel, EpistemicIndex, GaussianReference, draw_index,
                  index_batch, joint_logprob, marginal_probs, marginal_probs_batch,
                  restrict_classes)
from .ensemble import EnsembleModel, ensemble_logits, subensemble
from .epinet import BaseNet, EpinetModel, epinet_logits, epinet_variance_probe
from .errors import (ConfigError, ContractError, DegenerateBaselineError, DigestError,
                     EnnBenchError, FormatError, MissingArtifactError, NonFiniteError,
                     ShapeError, TrainingError)
from .layers import ConvNet, Dense, Sequential, build_mlp, build_small_convnet, init_array
from .metrics import (DyadicConfig, PredictiveEvaluation, Temperature, accuracy,
                      anomaly_scores, aupr, confidence_score, dyadic_joint_nll, ece,
                      failure_rate, marginal_nll, mce, temperature_ratio_report,
                      tune_temperature)
from .reporting import MetricRecord, MetricsReport, render_csv, write_report
from .tensor import Tensor, conv2d, index_contract
from .training import SGD, TrainConfig, cross_entropy, train_base, train_ensemble, train_epinet, xent_ridge_loss

__version__ = "0.1.0"

__all__ = [
    "BaseNet", "ConfigError", "ContractError", "ConvNet", "CORRUPTION_TYPES",
    "DegenerateBaselineError", "Dense", "DigestError", "DiscreteReference", "DyadicConfig",
    "EnnBenchError", "EnnModel", "EnsembleModel", "EpinetModel", "EpistemicIndex",
    "FormatError", "GaussianReference", "ImageDataset", "MetricRecord", "MetricsReport",
    "MissingArtifactError", "NonFiniteError", "PredictiveEvaluation", "SEVERITIES",
    "SEVERITY_TABLES", "SGD", "Sequential", "ShapeError", "ShiftSuite", "Temperature",
    "Tensor", "TrainConfig", "TrainingError", "accuracy", "anomaly_scores", "aupr",
    "build_mlp", "build_small_convnet", "confidence_score", "conv2d", "corrupt",
    "cross_entropy", "draw_index", "dyadic_joint_nll", "ece", "ensemble_logits",
    "epinet_logits", "epinet_variance_probe", "failure_rate", "generate_dataset",
    "index_batch", "index_contract", "init_array", "joint_logprob", "load_checkpoint",
    "load_idx", "load_suite", "make_adversarial_split", "make_ood_split", "marginal_nll",
    "marginal_probs", "marginal_probs_batch", "mce", "read_checkpoint", "render_csv",
    "restrict_classes", "save_checkpoint", "subensemble", "temperature_ratio_report",
    "train_base", "train_ensemble", "train_epinet", "tune_temperature", "write_report",
    "write_suite", "xent_ridge_loss",
]
