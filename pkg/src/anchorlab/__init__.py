"""Desk-scale laboratory for geometric-anchor preference optimization.

Subpackages: ``engine`` (reverse-mode differentiation), ``policy`` (tiny
autoregressive models), ``objectives`` (margins, anchors, losses),
``trainer`` (optimizers and the perturb-evaluate-restore loop), ``datagen``
(synthetic corpora and noise), ``analysis`` (curvature probes, valuation),
``estimators`` (sklearn facade), ``cli`` (reproducible experiment runner).
"""

from .params import Gradient, ParamVector, ScopeMask, Segment
from .engine import finite_diff_grad, grad, grad_and_value, hvp, value
from .policy import (PolicyModel, ReferenceModel, freeze_reference, load_checkpoint,
                     log_prob, make_model, p_reward, save_checkpoint, sft_train)
from .objectives import (AnchorRecord, GapoConfig, PreferencePair, anchor_records,
                         batch_perturbation, dpo_loss, gapo_loss, gapo_weights,
                         instance_perturbation, margin, simpo_loss)
from .trainer import OptimizerState, StepMetrics, TrainConfig, sam_step, train_run, train_step
from .datagen import (CorpusConfig, PreferenceDataset, generate_corpus,
                      inject_length_flips, inject_random_flips, read_jsonl,
                      reward_accuracy, write_jsonl)
from .analysis import (SpectrumReport, ValuationRecord, dense_hessian_eigs,
                       lanczos_spectrum, select_subset, valuate_dataset)
from .estimators import PreferenceOptimizer

__version__ = "0.1.0"

__all__ = [
    "Gradient", "ParamVector", "ScopeMask", "Segment",
    "finite_diff_grad", "grad", "grad_and_value", "hvp", "value",
    "PolicyModel", "ReferenceModel", "freeze_reference", "load_checkpoint",
    "log_prob", "make_model", "p_reward", "save_checkpoint", "sft_train",
    "AnchorRecord", "GapoConfig", "PreferencePair", "anchor_records",
    "batch_perturbation", "dpo_loss", "gapo_loss", "gapo_weights",
    "instance_perturbation", "margin", "simpo_loss",
    "OptimizerState", "StepMetrics", "TrainConfig", "sam_step", "train_run", "train_step",
    "CorpusConfig", "PreferenceDataset", "generate_corpus", "inject_length_flips",
    "inject_random_flips", "read_jsonl", "reward_accuracy", "write_jsonl",
    "SpectrumReport", "ValuationRecord", "dense_hessian_eigs", "lanczos_spectrum",
    "select_subset", "valuate_dataset",
    "PreferenceOptimizer",
    "__version__",
]
