"""Landmark-based part parsing with viewpoint mixtures of tree models."""

__version__ = "0.1.0"

MODEL_FORMAT_VERSION = "1.0"
MANIFEST_FORMAT_VERSION = "1.0"
