"""Joint lobe segmentation and severity classification with multiple-instance learning."""

from .estimator import BagSampler, M2UNetClassifier, VolumePreprocessor
from .network import M2UNetNet

__all__ = ["BagSampler", "M2UNetClassifier", "M2UNetNet", "VolumePreprocessor"]
__version__ = "0.1.0"
