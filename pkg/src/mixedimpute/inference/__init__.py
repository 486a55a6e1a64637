"""Estimation: RILM marginal ML, MH sampling for MELS/SPLSME, draws and diagnostics."""
from .diagnostics import ess, split_rhat, summarize
from .draws import (
    FitSummary,
    PosteriorDrawSet,
    draw_parameter_sets,
    evenly_spaced_indices,
    natural_names,
)
from .fit import fit_kind, fit_model
from .mcmc import McmcConfig, PriorSpec, run_mh
from .ml import RilmFit, fit_rilm_ml, rilm_marginal_loglik

__all__ = [
    "FitSummary", "McmcConfig", "PosteriorDrawSet", "PriorSpec", "RilmFit", "draw_parameter_sets", "ess",
    "evenly_spaced_indices", "fit_kind", "fit_model", "fit_rilm_ml", "natural_names", "rilm_marginal_loglik", "run_mh", "split_rhat",
    "summarize",
]
