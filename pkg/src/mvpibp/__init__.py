"""Multivariate probit Indian buffet process (MVP-IBP) for correlated species
occurrence data: prior simulation, posterior samplers and richness prediction."""
from .model import (CommonRho, CovariateDesign, CuspHyper, Factor, FeatureMatrix, HierarchicalZ,
                    IbpCalibration, Identity, IndependentNormal, NIW, calibrate)
from .mcmc import McmcConfig, NumericalFailure
from .richness import accumulation_curve, expected_richness, predict_delta
from .sampler_factor import FactorHyper, fit_factor_mvpibp
from .sampler_ibp import fit_ibp
from .sampler_twostage import run_common_rho, run_covariate, run_flat_ablation, run_hierarchical

__version__ = "0.1.0"
