"""Confidence estimation for document information-extraction outputs.

A multi-modal conformal predictor (visual, lingual and structural encoders,
fused and fed to a small classifier) judges each extracted key-value field,
and a document-level anomaly detector adds a scalar telling how far the
whole document sits from the training layouts.
"""

from .confidence import ConfidenceModel, ConfidenceOutput, ModelConfig, predict_confidence, train_hycedis
from .corpus import CorpusConfig, FeatureRecord, Split, generate_corpus, load_dataset, save_corpus
from .metrics import EvalReport, ece, roc_auc
from .vcad import VcadConfig, VcadModel, anomaly_score

__version__ = "0.1.0"

__all__ = [
    "ConfidenceModel",
    "ConfidenceOutput",
    "CorpusConfig",
    "EvalReport",
    "FeatureRecord",
    "ModelConfig",
    "Split",
    "VcadConfig",
    "VcadModel",
    "anomaly_score",
    "ece",
    "generate_corpus",
    "load_dataset",
    "predict_confidence",
    "roc_auc",
    "save_corpus",
    "train_hycedis",
]
