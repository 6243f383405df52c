"""Speculative feature caching for diffusion sampling on a desk-scale testbed.

A cheap Taylor draft extrapolates per-layer features of a layered denoiser,
one recomputed block verifies each draft, and rejected steps fall back to a
full forward pass.
"""
from .diffusion import DiffusionSchedule, SamplerKind, build_schedule, ddim_step, ddpm_step
from .draft import DraftKind, FeatureCache, finite_difference, taylor_predict
from .engine import (CostLedger, EngineConfig, Trajectory, run_baseline, run_batch, run_speca,
                     speedup)
from .models import (AnalyticGmmModel, GmmSpec, LayeredDenoiser, denoiser_forward, gmm_eps,
                     gmm_sample, init_denoiser, load_weights, ring_gmm, save_weights)
from .verifier import VerifierConfig, relative_error, threshold_at

__all__ = [
    "DiffusionSchedule", "SamplerKind", "build_schedule", "ddim_step", "ddpm_step",
    "DraftKind", "FeatureCache", "finite_difference", "taylor_predict",
    "CostLedger", "EngineConfig", "Trajectory", "run_baseline", "run_batch", "run_speca",
    "speedup", "AnalyticGmmModel", "GmmSpec", "LayeredDenoiser", "denoiser_forward", "gmm_eps",
    "gmm_sample", "init_denoiser", "load_weights", "ring_gmm", "save_weights",
    "VerifierConfig", "relative_error", "threshold_at",
]
__version__ = "0.1.0"
