"""Post-hoc reliability classification for machine-learned interatomic
potentials, operating on frozen per-atom backbone embeddings."""

__version__ = "0.1.0"
