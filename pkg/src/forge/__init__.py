"""Numerical laboratory for prescribed-surface blow-up of the focusing wave equation."""

from .core import ModelParams, Nonlinearity, derive_params, eval_A, chi
from .geometry import Hypersurface, InfluenceRegion, LorentzGraphMap, build_bundle
from .ansatz import AnsatzStack, GridSpec, build_stack
from .solver import SolverConfig, solve
from .fitting import fit_exponent, decay_fit

__version__ = "0.1.0"

__all__ = [
    "ModelParams", "Nonlinearity", "derive_params", "eval_A", "chi",
    "Hypersurface", "InfluenceRegion", "LorentzGraphMap", "build_bundle",
    "AnsatzStack", "GridSpec", "build_stack", "SolverConfig", "solve",
    "fit_exponent", "decay_fit",
]
