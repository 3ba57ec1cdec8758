"""Feature-map distortion protection for image classifiers."""

__version__ = "0.1.0"
