"""Neural estimation and optimization of directed-information rates and
channel capacity, with Q-graph bounds and constellation shaping."""

from .channels import ChannelSpec, exact_capacity_oracle, sample_trajectory
from .estimators import DineModel, EstimateReport, MineModel, mc_evaluate
from .policy import MiTrainConfig, PmfGenerator, PolicyGradConfig, train_di, train_dine, train_mi
from .qgraph import QGraph, count_qgraphs, qgraph_bound
from .shaping import gauss_hermite_mi, make_constellation, run_shaping

__version__ = "0.1.0"

__all__ = [
    "ChannelSpec",
    "DineModel",
    "EstimateReport",
    "MiTrainConfig",
    "MineModel",
    "PmfGenerator",
    "PolicyGradConfig",
    "QGraph",
    "count_qgraphs",
    "exact_capacity_oracle",
    "gauss_hermite_mi",
    "make_constellation",
    "mc_evaluate",
    "qgraph_bound",
    "run_shaping",
    "sample_trajectory",
    "train_di",
    "train_dine",
    "train_mi",
]
