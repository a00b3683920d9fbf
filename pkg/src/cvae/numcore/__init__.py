from .distributions import (
    DiagGaussian,
    bernoulli_log_mass,
    diag_gaussian_kl,
    gaussian_log_density,
    gaussian_log_terms,
    kl_to_standard_normal,
    reparam_sample,
    standard_normal_log_density,
)
from .nn import MLPSpec, init_mlp, mlp_forward
from .optim import AdamState, OptimizerError, adam_step
from .tensor import ContractError, DimensionError, Tensor, as_tensor, gradient, parameter

__all__ = [
    "AdamState",
    "ContractError",
    "DiagGaussian",
    "DimensionError",
    "MLPSpec",
    "OptimizerError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "bernoulli_log_mass",
    "diag_gaussian_kl",
    "gaussian_log_density",
    "gaussian_log_terms",
    "gradient",
    "init_mlp",
    "kl_to_standard_normal",
    "mlp_forward",
    "parameter",
    "reparam_sample",
    "standard_normal_log_density",
]
