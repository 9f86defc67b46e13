"""Confidence-threshold-reduction training, losses, attacks and analysis."""

__version__ = "0.1.0"
