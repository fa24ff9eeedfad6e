"""Generalized multitrait-multimethod models for random and systematic measurement error."""
from .config import IngestSpec, ModelConfig, ingest, load_config
from .core import latent_prior, linear_predictor
from .data import Dataset
from .design import Constraint, LatentCell, MtmmDesign, VariableSpec, category_scores, validate_design
from .engine import (FitControls, canonicalize, direct_fit, em_fit, hybrid_fit, marginal_loglik,
                     multistart, observed_information, posterior_cells, simulate, start_values)
from .errors import ConfigError, DataError, GmtmmError, NumericalError, SingularInformationError
from .families import (CensoredGaussian, CumulativeProbit, Gaussian, Multinomial, make_family,
                       response_logdensity)
from .identify import information_rank, jacobian_rank_scan
from .linear import (LinearParams, fit_ml, implied_cross_correlation, implied_moments,
                     reliability_method_effects)
from .metrics import (bootstrap_se, implied_quality, information_se, linear_equivalent, model_grid,
                      quality, quality_intervals)
from .params import ParameterSet, default_parameters
from .results import FitResult, aic_bic
from .study import StudyResult, StudySpec, emit_table, parse_table, run_study

__all__ = [
    "IngestSpec", "ModelConfig", "ingest", "load_config",
    "latent_prior", "linear_predictor", "Dataset",
    "Constraint", "LatentCell", "MtmmDesign", "VariableSpec", "category_scores", "validate_design",
    "FitControls", "canonicalize", "direct_fit", "em_fit", "hybrid_fit", "marginal_loglik", "multistart",
    "observed_information", "posterior_cells", "simulate", "start_values",
    "ConfigError", "DataError", "GmtmmError", "NumericalError", "SingularInformationError",
    "CensoredGaussian", "CumulativeProbit", "Gaussian", "Multinomial", "make_family", "response_logdensity",
    "information_rank", "jacobian_rank_scan",
    "LinearParams", "fit_ml", "implied_cross_correlation", "implied_moments", "reliability_method_effects",
    "bootstrap_se", "implied_quality", "information_se", "linear_equivalent", "model_grid", "quality",
    "quality_intervals", "ParameterSet", "default_parameters", "FitResult", "aic_bic",
    "StudyResult", "StudySpec", "emit_table", "parse_table", "run_study",
]
