"""Numpy CNN toolkit for four-class retinal OCT classification."""
from .constants import ARCHITECTURES, CLASS_NAMES, INPUT_SHAPE
from .models import Network, build, param_count, predict

__all__ = ["ARCHITECTURES", "CLASS_NAMES", "INPUT_SHAPE", "Network", "build", "param_count", "predict"]
__version__ = "0.1.0"
