from .data import Dataset, DatasetMissing, load_dataset, make_blobs, save_dataset, train_val_split
from .models import Hyperparameters, evaluate, init_weights, loss_and_grad, model_family, train_local
from .partition import (
    InfeasibleAssignment,
    PartitionPlan,
    label_count_matrix,
    partition,
    partition_dirichlet,
    partition_iid,
    partition_label_skew,
    skew_metrics,
)

__all__ = [
    "Dataset", "DatasetMissing", "load_dataset", "make_blobs", "save_dataset", "train_val_split",
    "Hyperparameters", "evaluate", "init_weights", "loss_and_grad", "model_family", "train_local",
    "InfeasibleAssignment", "PartitionPlan", "label_count_matrix", "partition", "partition_dirichlet",
    "partition_iid", "partition_label_skew", "skew_metrics",
]
