"""Hybrid annealed particle filtering with sparse Bayesian mixture proposals."""

__version__ = "0.1.0"

from . import core, sparse_bayes, mixture, filters, multimodality, synthbench  # noqa: E402

__all__ = ["core", "sparse_bayes", "mixture", "filters", "multimodality", "synthbench",
           "__version__"]
