"""Uplift modeling for multiple time-dependent treatments.

Estimates how much each company's bankruptcy probability changes under the
treatments it actually received, trains sequence-aware and timing-blind
uplift models, and scores them with rank-based uplift metrics against
synthetic ground truth.
"""

__version__ = "0.1.0"
