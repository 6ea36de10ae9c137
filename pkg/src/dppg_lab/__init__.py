"""Distribution-parameter actor-critic methods.

The agent emits the parameters ``u`` of an action distribution and the
environment draws ``A ~ f(.|u)``.  This package holds the pieces needed to
study that view: small numpy MLPs, bandit and point-mass environments,
parameter-space oracles, gradient estimators (LR, RP, ST, DPG, DPPG),
interpolated critic learning, full training loops and a sweep harness.
"""
from .agents import AgentConfig, RunLog, evaluate_policy, train
from .envs import make_env
from .errors import (ConfigError, ContractViolation, DivergenceError, EstimatorError, InfeasibleError, LabError,
                     PrecisionError)

__version__ = "0.1.0"

__all__ = ["AgentConfig", "RunLog", "evaluate_policy", "train", "make_env", "ConfigError", "ContractViolation",
           "DivergenceError", "EstimatorError", "InfeasibleError", "LabError", "PrecisionError", "__version__"]
