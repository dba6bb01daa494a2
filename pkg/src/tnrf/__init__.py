"""Template-conditioned neural radiance fields with dense correspondence."""
from .correspondence import Mesh, correspond, extract_mesh, to_template
from .dataset import ObjectRecord, View, generate_synthetic_family, load_dataset, toy_chair_spec
from .estimator import TemplateNeRF
from .fields import FieldConfig, FieldModel, LatentPair
from .trainer import TrainConfig, init_training, train, train_step

__version__ = "0.1.0"

__all__ = [
    "FieldConfig",
    "FieldModel",
    "LatentPair",
    "Mesh",
    "ObjectRecord",
    "TemplateNeRF",
    "TrainConfig",
    "View",
    "correspond",
    "extract_mesh",
    "generate_synthetic_family",
    "init_training",
    "load_dataset",
    "to_template",
    "toy_chair_spec",
    "train",
    "train_step",
]
