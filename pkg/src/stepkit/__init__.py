"""Multi-cue temporal feature learning, key-step extraction and evaluation."""

__version__ = "0.1.0"
