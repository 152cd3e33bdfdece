"""Link functions, PDE solvers and the forward maps built from them."""
from .darcy import ConditioningError, DarcyProblem, solve_darcy
from .links import LinkFunction, link_apply, link_inverse
from .maps import ForwardMap, darcy_map, forward_apply, linear_toy_map, subdiffusion_map
from .subdiffusion import SubdiffusionProblem, solve_subdiffusion

__all__ = [
    "ConditioningError", "DarcyProblem", "ForwardMap", "LinkFunction", "SubdiffusionProblem",
    "darcy_map", "forward_apply", "link_apply", "link_inverse", "linear_toy_map",
    "solve_darcy", "solve_subdiffusion", "subdiffusion_map",
]
