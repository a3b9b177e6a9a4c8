"""Point-cloud 3D detection with local-global context features."""

__version__ = "0.1.0"
