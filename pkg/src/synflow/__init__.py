"""Pruning neural networks at initialization by iterative synaptic flow conservation.

Modules: ``netgraph`` (network descriptions and parameters), ``autodiff``
(forward/backward passes), ``scoring`` (SynFlow, SNIP, GraSP, magnitude,
random), ``pruner`` (global masking and the iterative prune loop),
``conservation`` (numerical checks of the conservation laws) and
``harness`` (datasets, training, sweeps and reports).
"""

from .netgraph import NetworkSpec, ParamSet, StructureError, build_network, max_compression, toy_vgg
from .pruner import CompressionSchedule, PruneReport, detect_layer_collapse, prune
from .scoring import ScoreMap, ScoringContext, score_synflow, synflow_closed_form

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec", "ParamSet", "StructureError", "build_network", "max_compression", "toy_vgg",
    "CompressionSchedule", "PruneReport", "detect_layer_collapse", "prune",
    "ScoreMap", "ScoringContext", "score_synflow", "synflow_closed_form",
]
