"""Case-level diagnosis from multi-scan radiology studies.

A desk-scale library for training and evaluating multi-label classifiers
that read whole patient cases: several 2D images and/or 3D volumes are
encoded by a shared visual backbone, fused by a small transformer into one
case vector, and classified against frozen text-derived class embeddings for
long-tailed label sets. Ships with a synthetic planted-signal corpus
generator, a stratified bootstrap evaluation protocol, transfer tooling
(zero-shot mapping and fine-tuning), and Score-CAM explanations.
"""

from .corpus import (
    Case,
    Corpus,
    LabelSpace,
    Scan,
    SplitAssignment,
    build_label_space,
    load_manifest,
    split_corpus,
)
from .encoders import EncoderConfig, VisualEncoder
from .errors import (
    CasediagError,
    DataError,
    ManifestError,
    MissingAssetError,
    NumericError,
    UsageError,
)
from .fusion import FusionConfig, FusionModule
from .knowledge import KnowledgeConfig, TextEncoder, embed_labels
from .model import CaseModel, build_model, forward_case, load_checkpoint, save_checkpoint
from .preprocess import AugmentConfig, CanonicalGeometry, augment, normalize_scan
from .synthetic import SyntheticConfig, generate_synthetic
from .training import TrainConfig, finetune, select_threshold, train, zero_shot_predict

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "CanonicalGeometry",
    "Case",
    "CaseModel",
    "CasediagError",
    "Corpus",
    "DataError",
    "EncoderConfig",
    "FusionConfig",
    "FusionModule",
    "KnowledgeConfig",
    "LabelSpace",
    "ManifestError",
    "MissingAssetError",
    "NumericError",
    "Scan",
    "SplitAssignment",
    "SyntheticConfig",
    "TextEncoder",
    "TrainConfig",
    "UsageError",
    "VisualEncoder",
    "augment",
    "build_label_space",
    "build_model",
    "embed_labels",
    "finetune",
    "forward_case",
    "generate_synthetic",
    "load_checkpoint",
    "load_manifest",
    "normalize_scan",
    "save_checkpoint",
    "select_threshold",
    "split_corpus",
    "train",
    "zero_shot_predict",
    "__version__",
]
