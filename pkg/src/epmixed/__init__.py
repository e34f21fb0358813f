"""Sparse, distributable expectation propagation for Bayesian GLMMs."""
from .ep import EPConfig, Posterior, SiteStore, fit
from .model import Dataset, Likelihood, ModelSpec, PriorSpec, SimConfig, load_dataset, simulate_dataset

__all__ = [
    "Dataset", "EPConfig", "Likelihood", "ModelSpec", "Posterior", "PriorSpec", "SimConfig",
    "SiteStore", "fit", "load_dataset", "simulate_dataset",
]
__version__ = "0.1.0"
