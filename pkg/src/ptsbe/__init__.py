"""Model-based exploration with Bayesian dynamics models and information-gain bonuses."""

__version__ = "0.1.0"
