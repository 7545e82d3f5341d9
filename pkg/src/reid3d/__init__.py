"""3D-convolutional track encoder with non-local attention for video re-identification."""

__version__ = "0.1.0"
