"""Cascaded panoptic narrative detection and segmentation at desk scale."""
from .estimator import NICEModel
from .scene import GenerationConfig, Scene, generate_dataset, generate_scene, load_dataset, save_dataset
from .trainer import TrainConfig, lr_at, train

__all__ = ["NICEModel", "GenerationConfig", "Scene", "TrainConfig", "generate_dataset", "generate_scene",
           "load_dataset", "lr_at", "save_dataset", "train"]
__version__ = "0.1.0"
