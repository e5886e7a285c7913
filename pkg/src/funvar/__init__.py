"""Functional augmented VARs: density panels, tensor loadings, Gibbs sampling and functional IRFs."""

from .density_panel import (ClrField, ClrTensor, DensityField, GridSpec, build_tensor, clr,
                            estimate_density, inverse_clr, silverman_bandwidths)
from .dgp_sim import DgpConfig, MixtureSpec, oracle_irf, simulate
from .favar_core import (GibbsDraws, PriorConfig, SpikeSlabConfig, StateSpaceData, VarParams, build_selector,
                         draw_latent_states, gibbs_run)
from .ingest import FirmPanel, MacroPanel, clean_firm_panel
from .structural import Firf, Irf, cholesky_identify, firf, irf_draws
from .tensor_factor import LoadingSet, ScorePath, cp_als, factorize, mlpca, pca_unfolded

__version__ = "0.1.0"

__all__ = [
    "ClrField", "ClrTensor", "DensityField", "GridSpec", "build_tensor", "clr",
    "estimate_density", "inverse_clr", "silverman_bandwidths",
    "DgpConfig", "MixtureSpec", "oracle_irf", "simulate",
    "GibbsDraws", "PriorConfig", "SpikeSlabConfig", "StateSpaceData", "VarParams", "build_selector",
    "draw_latent_states", "gibbs_run",
    "FirmPanel", "MacroPanel", "clean_firm_panel",
    "Firf", "Irf", "cholesky_identify", "firf", "irf_draws",
    "LoadingSet", "ScorePath", "cp_als", "factorize", "mlpca", "pca_unfolded",
]
