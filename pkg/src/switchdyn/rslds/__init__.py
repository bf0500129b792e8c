"""Recurrent switching linear dynamical systems."""
from .em import EMConfig, EMTrace, fit_variational_em, transition_objective
from .forecast import filter_context, forecast
from .inference import (ContinuousPosterior, RegimePosterior, continuous_laplace, discrete_posterior,
                        observed_posterior)
from .messages import block_tridiag_solve, forward_backward, forward_filter
from .model import RSLDSModel, make_model, sample_trajectory, simulate, transition_probs

__all__ = [
    "ContinuousPosterior", "EMConfig", "EMTrace", "RSLDSModel", "RegimePosterior",
    "block_tridiag_solve", "continuous_laplace", "discrete_posterior", "filter_context", "fit_variational_em",
    "forecast", "forward_backward", "forward_filter", "make_model", "observed_posterior", "sample_trajectory",
    "simulate", "transition_objective", "transition_probs",
]
