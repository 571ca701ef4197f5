"""Single-scene unsupervised segmentation with deep clustering."""
from .kernels import BACKEND
from .segnet import ModelParams, forward, init_params, segment_scene
from .trainer import TrainConfig, train
from .sceneio import Scene, SegmentationMap, load_model, load_scene, save_model

__version__ = "0.1.0"
