"""Entropic optimal-transport rate functions for noisy data on finite alphabets.

Submodules: ``measures``, ``channels``, ``transport`` (Sinkhorn),
``rate`` (rate functions), ``inference`` (tests and error exponents),
``decisions`` (robust predictors and disappointment) and ``harness``
(configs, experiment runs and the CLI back end).
"""

__version__ = "0.1.0"

from .channels import Channel, channel_from_cost, channel_gaussian_grid, channel_irrelevant, channel_noiseless, convolve
from .errors import (DimensionError, DomainError, InfeasibleFormulationError, InvalidChannelError, NoFeasiblePlanError,
                     NoisyOTError, NonConvergenceError, ValidationError)
from .measures import BaseWeights, ProbMeasure, SampleRecord, kl_divergence, tv_distance
from .rate import rate_closed_form, rate_variational, smoothed_rate
from .transport import eot_distance, kl_chain_decomposition

__all__ = [
    "Channel", "channel_from_cost", "channel_gaussian_grid", "channel_irrelevant", "channel_noiseless", "convolve",
    "DimensionError", "DomainError", "InfeasibleFormulationError", "InvalidChannelError", "NoFeasiblePlanError",
    "NoisyOTError", "NonConvergenceError", "ValidationError",
    "BaseWeights", "ProbMeasure", "SampleRecord", "kl_divergence", "tv_distance",
    "rate_closed_form", "rate_variational", "smoothed_rate",
    "eot_distance", "kl_chain_decomposition",
]
