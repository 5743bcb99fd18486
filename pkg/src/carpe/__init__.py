"""Real-time pedestrian trajectory prediction with a graph module and a small CNN."""
from .dataio import FrameSample, build_windows, parse_annotation_file
from .evalbench import ade, benchmark, evaluate, fde, linear_baseline
from .model import CarpeModel, Hyper, TrainConfig, forward, load_weights, save_weights, train

__all__ = [
    "CarpeModel", "FrameSample", "Hyper", "TrainConfig", "ade", "benchmark", "build_windows",
    "evaluate", "fde", "forward", "linear_baseline", "load_weights", "parse_annotation_file",
    "save_weights", "train",
]
__version__ = "0.1.0"
