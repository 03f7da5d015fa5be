"""Learning pairwise CRF energies by regressing label-pair marginals."""

__version__ = "0.1.0"

from .graph import (  # noqa: E402
    EnergyFunction, Graph, GraphError, Instance, MarginalTables, empirical_marginals,
    energy_eval, is_tree, tree_ml_params,
)
from .inference import (  # noqa: E402
    InferenceResult, exact_map, gibbs_sample, icm, tree_bp_marginals, tree_map, tree_sample,
    trws_map,
)
from .train import PairwiseModel, SamplingConfig, GBTParams, train_lscrf  # noqa: E402
from .predict import predict_energy, predict_labeling  # noqa: E402

__all__ = [
    "Graph", "GraphError", "Instance", "EnergyFunction", "MarginalTables",
    "empirical_marginals", "energy_eval", "is_tree", "tree_ml_params",
    "InferenceResult", "exact_map", "gibbs_sample", "icm", "tree_bp_marginals", "tree_map",
    "tree_sample", "trws_map", "PairwiseModel", "SamplingConfig", "GBTParams",
    "train_lscrf", "predict_energy", "predict_labeling",
]
