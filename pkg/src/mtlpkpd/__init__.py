"""Multi-task learning of input-driven pharmacokinetic/pharmacodynamic response models."""

__version__ = "0.1.0"

from .inference import HmcConfig, PreprocessFlags, infer, sample_posterior
from .learning import TrainConfig, fit_cohort, fit_mtl, fit_task_descriptor, stl_model
from .mtl import MtlModel, PosteriorSamples
from .pdmodel import BasisConfig, PdParams, Task, default_basis, simulate
from .pkmodel import PkRates, solve_pk
from .prediction import predict
from .synthetic import CohortSpec, generate_cohort

__all__ = [
    "BasisConfig", "CohortSpec", "HmcConfig", "MtlModel", "PdParams", "PkRates", "PosteriorSamples",
    "PreprocessFlags", "Task", "TrainConfig", "default_basis", "fit_cohort", "fit_mtl", "fit_task_descriptor",
    "generate_cohort", "infer", "predict", "sample_posterior", "simulate", "solve_pk", "stl_model",
]
