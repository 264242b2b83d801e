"""Probabilistic-atlas brain MRI tissue segmentation with preprocessing, registration and metrics."""

from .volume import BACKGROUND, CSF, GM, WM, Geometry, LabelVolume, Volume

__version__ = "0.1.0"

__all__ = ["BACKGROUND", "CSF", "GM", "WM", "Geometry", "LabelVolume", "Volume", "__version__"]
