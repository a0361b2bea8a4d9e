"""Pattern-composed queries and quality-aware assignment for set-prediction detectors."""

__version__ = "0.1.0"
