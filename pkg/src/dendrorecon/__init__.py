"""Climate reconstruction from tree-ring widths.

Multi-step pipelines (standardization then calibration) and joint Bayesian
hierarchical models fitted by a block Gibbs sampler.
"""
__version__ = "0.1.0"
