"""Relational reasoning network for predicting 3-D craniomaxillofacial landmarks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    FoldPlan,
    SynthTemplate,
    augment,
    generate_augmented,
    generate_synthetic,
    load_dataset,
    load_subjects,
    make_folds,
    save_dataset,
)
from .errors import *  # noqa: F401,F403
from .landmarks import (
    ALL_LANDMARKS,
    LandmarkName,
    LandmarkSet,
    canonical_order,
    pairwise_features,
    to_spherical,
)
from .model import DropoutConfig, Prediction, RrnConfig, RrnModel, build, loss
from .training import PRESETS, ExperimentConfig, compare_dropout, evaluate, fit, preset, run_preset, train

__version__ = "0.1.0"
