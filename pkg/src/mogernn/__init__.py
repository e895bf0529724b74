"""Mixture-of-graph-experts recurrent forecaster for traffic at observed and virtual sensors."""

from .aggregators import KINDS, GraphOperators, aggregate
from .autodiff import DegenerateRowError, ShapeError, Tensor, backward, tensor
from .data import (DataError, SpeedDataset, SyntheticSpec, generate_synthetic, load_speed_matrix,
                   save_speed_matrix, split_train_test)
from .estimator import MoGERNN
from .evaluation import (ROLES, MetricsReport, RoleAssignment, assign_roles, baseline_knn_ed,
                         baseline_persistence, compute_metrics, run_dynamic_scenario, vs_to_aas_distance)
from .graph import SensorGraph, build_adjacency, load_distances, mask_adjacency, save_distances
from .model import ModelConfig
from .training import EmptyDatasetError, TrainConfig, TrainingDiverged, teacher_forcing_rate

__version__ = "0.1.0"
