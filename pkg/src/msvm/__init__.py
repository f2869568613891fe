"""Multi-scale 2D selective scanning on a small numpy autodiff core."""
from .arch import ArchSpec, Model, build_arch, count_flops, count_params
from .errors import (ConfigError, DivergenceError, DomainError, EmptyOutputError, GradCheckError,
                     OrderingError, ShapeError, StateError)
from .gradcheck import grad_check
from .ms2d import SS2D, Ms2dConfig, Ms2dLayer, ms2d_forward, scan_cost
from .routes import ALL_ROUTES, ScanRoute, flatten, min_route_distance, route_distance, ss2d, unflatten
from .ssm import SsmParams, build_selective_kernel, contribution, decay_factor, init_ssm_params, selective_scan
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ALL_ROUTES", "ArchSpec", "ConfigError", "DivergenceError", "DomainError", "EmptyOutputError",
    "GradCheckError", "Model", "Ms2dConfig", "Ms2dLayer", "OrderingError", "SS2D", "ScanRoute",
    "ShapeError", "SsmParams", "StateError", "Tensor", "build_arch", "build_selective_kernel",
    "contribution", "count_flops", "count_params", "decay_factor", "flatten", "grad_check",
    "init_ssm_params", "min_route_distance", "ms2d_forward", "no_grad", "route_distance",
    "scan_cost", "selective_scan", "ss2d", "unflatten",
]
