"""Multi-camera polar bird's-eye-view perception at desk scale."""

__version__ = "0.1.0"
