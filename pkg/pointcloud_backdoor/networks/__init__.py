"""Neural networks: classifiers, the conditional generator and their checkpoints."""

# Classifiers
from .classifiers import (
    CLASSIFIER_TYPES,
    Classifier,
    EdgeConvMini,
    PointNetMini,
    build_classifier,
    predict,
)

# Generator
from .morphnet import MorphBlock, MorphNet, one_hot, sphere_grid

# Persistence
from .checkpoint import (
    load_checkpoint,
    load_classifier,
    load_morphnet,
    model_digest,
    read_checkpoint_meta,
    save_checkpoint,
)

__all__ = [
    # Classifiers
    "CLASSIFIER_TYPES",
    "Classifier",
    "EdgeConvMini",
    "PointNetMini",
    "build_classifier",
    "predict",
    # Generator
    "MorphBlock",
    "MorphNet",
    "one_hot",
    "sphere_grid",
    # Persistence
    "load_checkpoint",
    "load_classifier",
    "load_morphnet",
    "model_digest",
    "read_checkpoint_meta",
    "save_checkpoint",
]
