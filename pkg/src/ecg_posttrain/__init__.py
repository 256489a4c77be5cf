"""ECG multi-label classification with two-stage post-training."""

__version__ = "0.1.0"
