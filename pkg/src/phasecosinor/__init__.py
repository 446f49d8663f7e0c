"""Mixed-effects cosinor models with correction for individual phase offsets."""
from .circstat import AngleSample, circular_mean, circular_variance, resultant_length
from .core import (
    CosinorParams,
    FitCovariance,
    LongitudinalSeries,
    RandomEffectSpec,
    amplitude_phase_to_linear,
    linear_to_amplitude_phase,
    phase_variance,
    tangential_variance,
)
from .estimators import MixedCosinorRegressor, PhaseShiftAligner
from .evaluation import PairedQuantities, gamma_fit, gene_filter
from .lmm import (
    EmConfig,
    MixedFit,
    em_fit,
    gls_fixed_effects,
    individual_cosinor,
    equispaced_v_inverse,
    wald_test,
)
from .phase_adjust import AdjustConfig, GeneMatrix, run_adjustment
from .simgen import generate_panel, generate_trial, get_setting, run_campaign

__version__ = "0.1.0"

__all__ = [
    "AdjustConfig",
    "AngleSample",
    "CosinorParams",
    "EmConfig",
    "FitCovariance",
    "GeneMatrix",
    "LongitudinalSeries",
    "MixedCosinorRegressor",
    "MixedFit",
    "PairedQuantities",
    "PhaseShiftAligner",
    "RandomEffectSpec",
    "amplitude_phase_to_linear",
    "circular_mean",
    "circular_variance",
    "em_fit",
    "gamma_fit",
    "gene_filter",
    "generate_panel",
    "generate_trial",
    "get_setting",
    "gls_fixed_effects",
    "individual_cosinor",
    "equispaced_v_inverse",
    "linear_to_amplitude_phase",
    "phase_variance",
    "resultant_length",
    "run_adjustment",
    "run_campaign",
    "tangential_variance",
    "wald_test",
]
