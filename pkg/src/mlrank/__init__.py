"""Label ranking with per-class significance: Gaussian ranking losses, baselines, metrics and data."""

__version__ = "0.1.0"
