"""Semi-supervised weather-robust segmentation with an EMA teacher, in plain numpy."""

__version__ = "0.1.0"
