"""Expectation propagation with kernel-based learned message operators."""
from .errors import KernelEPError
from .expfam import ExpFamMessage, Family, SuffStats
from .features import FeatureMap, median_heuristic
from .bayes import RegressorState, batch_fit, online_update
from .oracle import (
    CompoundGammaFactor,
    ImportanceSamplingOperator,
    LogisticFactor,
    QuadratureOperator,
)
from .graph import FactorGraph, build_compound_gamma_graph, build_logistic_graph, run_ep
from .kjit import JitOperator, load_operator, save_operator

__version__ = "0.1.0"
