"""Per-user hybrids of a matrix-factorisation and a popularity recommender for music listening data."""

__version__ = "0.1.0"
