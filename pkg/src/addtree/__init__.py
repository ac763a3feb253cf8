"""Bayesian optimization over tree-structured parameter spaces.

The main pieces are a tree-structured space (:mod:`addtree.space`), the
Add-Tree additive covariance (:mod:`addtree.kernels`), exact GP inference
(:mod:`addtree.gp`), per-vertex GP-UCB (:mod:`addtree.acquisition`),
comparison strategies (:mod:`addtree.baselines`) and the benchmark harness
(:mod:`addtree.bench`).
"""

__version__ = "0.1.0"

from .acquisition import Proposal, UcbConfig, naive_propose, propose
from .estimator import AddTreeRegressor, IndependentGPRegressor, TreeLinearizer
from .gp import Dataset, FitConfig, FittedGP, fit
from .kernels import AddTreeKernel, Interaction, build_add_tree
from .space import StructuredPoint, TreeSpec, load_spec, parse_spec

__all__ = [
    "__version__",
    "TreeSpec",
    "StructuredPoint",
    "parse_spec",
    "load_spec",
    "AddTreeKernel",
    "Interaction",
    "build_add_tree",
    "Dataset",
    "FitConfig",
    "FittedGP",
    "fit",
    "UcbConfig",
    "Proposal",
    "propose",
    "naive_propose",
    "AddTreeRegressor",
    "IndependentGPRegressor",
    "TreeLinearizer",
]
