"""respifuse: multimodal respiratory-audio screening with outer-product fusion.

A numpy/scipy implementation of the full pipeline: synthetic dataset
generation, spectrogram preprocessing, a from-scratch CNN layer library with
hand-written backpropagation, per-sound-type feature extractors with optional
contextual attention, outer-product feature fusion, a sex-aware classifier,
5-fold cross-validation training with AUC-based early stopping, and
rank-based ROC/AUC evaluation.
"""

from .errors import RespifuseError
from .evaluation import ResultsTable, ScoredPatient, pooled_validation_auc, roc_auc
from .ingest import (
    AudioClip,
    PatientRecord,
    generate_synthetic_dataset,
    load_wav,
    parse_manifest,
    write_manifest,
)
from .model import (
    Classifier,
    ContextualAttention,
    CovidModel,
    FeatureExtractor,
    FeatureVector,
    ModelConfig,
    OuterFusion,
    load_checkpoint,
    outer_fuse,
    save_checkpoint,
)
from .pipeline import load_dataset, preprocess_manifest, preprocess_patient
from .train import (
    FoldPlan,
    TrainingRun,
    average_epochs,
    balance_training_set,
    make_fold_plans,
    run_cross_validation,
    simulate_early_stopping,
    train_final,
    train_fold,
)

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "Classifier",
    "ContextualAttention",
    "CovidModel",
    "FeatureExtractor",
    "FeatureVector",
    "FoldPlan",
    "ModelConfig",
    "OuterFusion",
    "PatientRecord",
    "RespifuseError",
    "ResultsTable",
    "ScoredPatient",
    "TrainingRun",
    "average_epochs",
    "balance_training_set",
    "generate_synthetic_dataset",
    "load_checkpoint",
    "load_dataset",
    "load_wav",
    "make_fold_plans",
    "outer_fuse",
    "parse_manifest",
    "pooled_validation_auc",
    "preprocess_manifest",
    "preprocess_patient",
    "roc_auc",
    "run_cross_validation",
    "save_checkpoint",
    "simulate_early_stopping",
    "train_final",
    "train_fold",
    "write_manifest",
    "__version__",
]
