"""Supervised contrastive learning with phoneme-boundary masking for CTC speech recognition."""

__version__ = "0.1.0"
