"""Multi-pitch estimation with joint supervised and self-supervised objectives."""

__version__ = "0.1.0"
