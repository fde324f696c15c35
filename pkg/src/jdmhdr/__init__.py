"""Joint RGB-spectral decomposition priors and bilateral-grid tone enhancement."""

__version__ = "0.1.0"
