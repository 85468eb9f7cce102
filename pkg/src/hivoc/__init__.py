"""Budget-constrained optimal allocation of HIV prevention (PrEP) and
treatment-as-prevention (TaP) by Legendre-Gauss-Radau direct collocation and
sequential quadratic programming."""
from .config import ConfigError, ScenarioConfig, default_config, load_config
from .model import CostParams, ModelParams
from .oracle import ControlSchedule, calibrate, evaluate_policy, integrate
from .spectral import lgr_scheme
from .sqp import NlpProblem, SolverOptions, SolverResult, solve
from .transcribe import TranscribedNlp, build_grid, build_nlp

__version__ = "0.1.0"

__all__ = ["ConfigError", "ControlSchedule", "CostParams", "ModelParams", "NlpProblem",
           "ScenarioConfig", "SolverOptions", "SolverResult", "TranscribedNlp", "build_grid",
           "build_nlp", "calibrate", "default_config", "evaluate_policy", "integrate",
           "lgr_scheme", "load_config", "solve"]
