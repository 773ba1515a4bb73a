"""MCMC engine: block Gibbs sampler, draws container and diagnostics."""
from .diagnostics import autocovariance, effective_sample_size, split_rhat
from .draws import ConvergenceError, PosteriorDraws
from .sampler import (
    BLOCKS,
    ChainState,
    SamplerConfig,
    SamplerError,
    gibbs_update_block,
    initial_state,
    run,
)

__all__ = [
    "BLOCKS",
    "ChainState",
    "ConvergenceError",
    "PosteriorDraws",
    "SamplerConfig",
    "SamplerError",
    "autocovariance",
    "effective_sample_size",
    "gibbs_update_block",
    "initial_state",
    "run",
    "split_rhat",
]
