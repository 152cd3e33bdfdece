"""Mean-field variational inference with Besov priors for PDE-constrained regression."""
from . import forward, observation, pcn, pexp, prior, vi, wavelets
from .forward import ForwardMap, darcy_map, linear_toy_map, subdiffusion_map
from .observation import Dataset, GaussianLikelihood, simulate
from .pcn import ChainConfig, compare_vi_to_chain, run_chain
from .pexp import PExpDist
from .prior import BesovPriorSpec, Cutoff, rescale_for_N
from .vi import MeanFieldParams, OptimizerConfig, PriorScales, elbo, fit
from .wavelets import CoeffTree, WaveletBasis, analyze, synthesize

__version__ = "0.1.0"

__all__ = [
    "BesovPriorSpec", "ChainConfig", "CoeffTree", "Cutoff", "Dataset", "ForwardMap", "GaussianLikelihood",
    "MeanFieldParams", "OptimizerConfig", "PExpDist", "PriorScales", "WaveletBasis", "analyze",
    "compare_vi_to_chain", "darcy_map", "elbo", "fit", "forward", "linear_toy_map", "observation", "pcn",
    "pexp", "prior", "rescale_for_N", "run_chain", "simulate", "subdiffusion_map", "synthesize", "vi",
    "wavelets",
]
