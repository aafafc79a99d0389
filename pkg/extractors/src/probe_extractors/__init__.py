"""Adapters that run frozen MLIP backbone checkpoints over molecular
structures and export per-atom embeddings into PEC containers."""

__version__ = "0.1.0"
