"""Symbolic regression as sequential expression-tree construction with a Q-model."""

__version__ = "0.1.0"
