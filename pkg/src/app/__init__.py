"""
medl-uq: epistemic uncertainty for mixed-effects deep learning.

ARMED models with Bayesian, SWAG, MC-dropout and ensemble posteriors,
cross-validated significance testing and prediction confidence.
"""

__version__ = "0.1.0"
