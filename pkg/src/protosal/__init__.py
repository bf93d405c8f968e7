"""Prototype-network ground truth for benchmarking saliency maps on
histopathology-like patches."""
from .classifier import CNNClassifier
from .protopnet import ProtoPNetClassifier

__version__ = "0.1.0"
__all__ = ["CNNClassifier", "ProtoPNetClassifier", "__version__"]
