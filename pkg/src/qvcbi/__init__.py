"""Variational causal Bayesian inference for joint multi-hazard and building-damage mapping."""
from __future__ import annotations

__version__ = "0.1.0"

from .bounds import Evidence, elbo, lambda_xi, lse_upper_bound
from .graph import CausalNetwork, NetworkError, NetworkSpec, WeightSet, build_network
from .inference import FitConfig, FitDivergence, FitResult, PosteriorField, e_step_only, fit
from .pipeline import SceneFit, run_scene, scene_priors
from .priors import FragilityCurve, PagerStub, build_prior_field, hazus_state_probs
from .scene_io import Grid, Scene, assemble_scene, read_grid, write_grid
from .synthgen import SynthConfig, sample_scene, scenario_presets

__all__ = [
    "CausalNetwork", "Evidence", "FitConfig", "FitDivergence", "FitResult", "FragilityCurve", "Grid",
    "NetworkError", "NetworkSpec", "PagerStub", "PosteriorField", "Scene", "SceneFit", "SynthConfig",
    "WeightSet", "assemble_scene", "build_network", "build_prior_field", "e_step_only", "elbo", "fit",
    "hazus_state_probs", "lambda_xi", "lse_upper_bound", "read_grid", "run_scene", "sample_scene",
    "scenario_presets", "scene_priors", "write_grid",
]
