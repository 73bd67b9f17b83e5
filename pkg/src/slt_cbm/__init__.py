"""Learning coefficients and Bayesian estimators for linear concept-bottleneck and multitask networks."""

__version__ = "0.1.0"
