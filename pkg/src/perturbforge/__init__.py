"""Adversarial attacks and natural perturbations against image-spam classifiers."""

from .attacks import (
    CwConfig,
    DeepFoolConfig,
    FgsmConfig,
    UniversalConfig,
    UniversalPerturbation,
    apply_perturbation,
    cw_l2,
    deepfool,
    fgsm,
    universal_perturbation,
)
from .corpus import CorpusManifest, SyntheticSpec, generate_synthetic_corpus, load_manifest
from .imaging import CannyConcat, load_image, save_image
from .models import Checkpoint, SpamClassifier, build_classifier, build_surrogate, load_checkpoint, train
from .pipeline import PipelineConfig, build_adversarial_corpus

__version__ = "0.1.0"

__all__ = [
    "CwConfig",
    "DeepFoolConfig",
    "FgsmConfig",
    "UniversalConfig",
    "UniversalPerturbation",
    "apply_perturbation",
    "cw_l2",
    "deepfool",
    "fgsm",
    "universal_perturbation",
    "CorpusManifest",
    "SyntheticSpec",
    "generate_synthetic_corpus",
    "load_manifest",
    "CannyConcat",
    "load_image",
    "save_image",
    "Checkpoint",
    "SpamClassifier",
    "build_classifier",
    "build_surrogate",
    "load_checkpoint",
    "train",
    "PipelineConfig",
    "build_adversarial_corpus",
]
